#include "bevfuse/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace bevfuse {

namespace {

constexpr char kMagic[5] = {'F', 'B', 'W', 'T', '1'};

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw std::runtime_error("checkpoint: big-endian hosts are not supported");
  }
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamRefs& params) {
  require_little_endian();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 5);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const ParamRef& p : params) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.t->shape.size()));
    for (int d : p.t->shape) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(p.t->data.data()),
             static_cast<std::streamsize>(p.t->data.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, const ParamRefs& params) {
  require_little_endian();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);

  std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> found;
  const std::uint32_t count = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t ndim = read_pod<std::uint32_t>(is);
    std::vector<int> dims(ndim);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      dims[d] = static_cast<int>(read_pod<std::uint32_t>(is));
      numel *= static_cast<std::size_t>(dims[d]);
    }
    std::vector<double> data(numel);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
    found[name] = {std::move(dims), std::move(data)};
  }

  for (const ParamRef& p : params) {
    auto it = found.find(p.name);
    if (it == found.end()) throw std::runtime_error("checkpoint: missing tensor " + p.name);
    if (it->second.first != p.t->shape) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.t->data = it->second.second;
  }
}

}  // namespace bevfuse

#include "bevfuse/tfe.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace bevfuse {

void BevHistory::push(FeatureMap2D bev, EgoPose pose) {
  if (!entries.empty() && pose.timestamp <= entries.back().second.timestamp)
    throw std::invalid_argument("bev history: timestamps must be strictly increasing");
  entries.emplace_back(std::move(bev), pose);
  while (static_cast<int>(entries.size()) > capacity) entries.erase(entries.begin());
}

namespace {

template <typename T>
void wr(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T rd(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("history: truncated file");
  return v;
}

}  // namespace

void save_history(const std::string& path, const BevHistory& buf) {
  if constexpr (std::endian::native != std::endian::little)
    throw std::runtime_error("history: big-endian hosts are not supported");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("history: cannot open " + path + " for writing");
  os.write("FBHS1", 5);
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(buf.entries.size()));
  for (const auto& [map, pose] : buf.entries) {
    wr<std::int32_t>(os, pose.timestamp);
    for (int i = 0; i < 9; ++i) wr<double>(os, pose.world_from_ego.r[i]);
    for (int i = 0; i < 3; ++i) wr<double>(os, pose.world_from_ego.t[i]);
    wr<std::uint32_t>(os, static_cast<std::uint32_t>(map.t.shape.size()));
    for (int d : map.t.shape) wr<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(map.t.data.data()),
             static_cast<std::streamsize>(map.t.data.size() * sizeof(double)));
  }
}

BevHistory load_history(const std::string& path, int capacity) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("history: cannot open " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "FBHS1", 5) != 0) throw std::runtime_error("history: bad magic");
  BevHistory buf(capacity);
  const std::uint32_t count = rd<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    EgoPose pose;
    pose.timestamp = rd<std::int32_t>(is);
    for (int j = 0; j < 9; ++j) pose.world_from_ego.r[j] = rd<double>(is);
    for (int j = 0; j < 3; ++j) pose.world_from_ego.t[j] = rd<double>(is);
    const std::uint32_t nd = rd<std::uint32_t>(is);
    std::vector<int> dims(nd);
    for (auto& d : dims) d = static_cast<int>(rd<std::uint32_t>(is));
    Tensor t(dims);
    is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("history: truncated map");
    buf.push(FeatureMap2D(std::move(t)), pose);
  }
  return buf;
}

TfeEncoder TfeEncoder::make(const TfeConfig& cfg) {
  if (cfg.num_layers < 1) throw std::invalid_argument("tfe: num_layers must be >= 1");
  TfeEncoder e;
  e.cfg = cfg;
  for (int l = 0; l < cfg.num_layers; ++l) {
    TfeLayer layer;
    layer.tca = AttnSublayer::make(cfg.embed_dim, cfg.heads, cfg.points_k, 2);
    layer.ffn = FfnSublayer::make(cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult);
    e.layers.push_back(std::move(layer));
  }
  return e;
}

void TfeEncoder::init(Rng& rng) {
  for (TfeLayer& l : layers) {
    l.tca.init(rng);
    l.ffn.init(rng);
  }
}

void TfeEncoder::collect_params(const std::string& prefix, ParamRefs& out) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    layers[l].tca.collect_params(lp + ".tca", out);
    layers[l].ffn.collect_params(lp + ".ffn", out);
  }
}

FeatureMap2D TfeEncoder::forward(const FeatureMap2D& current, const BevHistory& buf, const EgoPose& pose_now,
                                 const BevGrid& grid, Cache* cache) const {
  check_shape(current.channels() == cfg.embed_dim, "tfe: current map channels != embed_dim");
  check_shape(current.height() == grid.h && current.width() == grid.w, "tfe: map does not match grid");

  std::vector<FeatureMap2D> targets;
  for (const auto& [map, pose] : buf.entries) targets.push_back(align_history_bev(map, pose, pose_now, grid));
  targets.push_back(current);
  const double frame_scale = cfg.mean_over_frames ? 1.0 / static_cast<double>(targets.size()) : 1.0;

  ReferencePoints refs(grid.n_cells(), 1, 2);
  for (int ix = 0; ix < grid.h; ++ix)
    for (int iy = 0; iy < grid.w; ++iy) {
      double* p = refs.at(ix * grid.w + iy, 0);
      p[0] = ix;
      p[1] = iy;
    }

  Tensor x = map_to_rows(current);
  if (cache) {
    cache->targets = targets;
    cache->refs = refs;
    cache->layers.assign(layers.size(), Cache::Layer{});
    cache->h = grid.h;
    cache->w = grid.w;
  }

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const TfeLayer& layer = layers[l];
    Cache::Layer* lc = cache ? &cache->layers[l] : nullptr;

    LayerNormCache lnc;
    Tensor z = layer_norm_forward(x, layer.tca.ln_g, layer.tca.ln_b, cfg.ln_eps, &lnc);
    Tensor inc(x.shape);
    for (std::size_t b = 0; b < targets.size(); ++b) {
      DeformAttnCache ac;
      Tensor ob = deform_attn_2d(z, refs, targets[b], layer.tca.attn, lc ? &ac : nullptr);
      if (lc) lc->attn.push_back(std::move(ac));
      for (std::size_t i = 0; i < inc.numel(); ++i) inc.data[i] += ob.data[i];
    }
    if (frame_scale != 1.0)
      for (double& v : inc.data) v *= frame_scale;
    for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += inc.data[i];
    if (lc) {
      lc->ln = std::move(lnc);
      lc->z = std::move(z);
    }

    x = layer.ffn.forward(x, cfg.ln_eps, lc ? &lc->ffn : nullptr);
  }
  return rows_to_map(x, grid.h, grid.w);
}

FeatureMap2D TfeEncoder::backward(const Cache& cache, const FeatureMap2D& dout) {
  const int h = cache.h, w = cache.w, c = cfg.embed_dim;
  const std::size_t n_targets = cache.targets.size();
  const std::size_t current_idx = n_targets - 1;
  const double frame_scale = cfg.mean_over_frames ? 1.0 / static_cast<double>(n_targets) : 1.0;

  Tensor dx = map_to_rows(dout);
  FeatureMap2D dcurrent(c, h, w);

  for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
    TfeLayer& layer = layers[l];
    const Cache::Layer& lc = cache.layers[l];

    dx = layer.ffn.backward(lc.ffn, dx);

    Tensor dinc = dx;
    if (frame_scale != 1.0)
      for (double& v : dinc.data) v *= frame_scale;
    Tensor dz(dx.shape);
    for (std::size_t b = 0; b < n_targets; ++b) {
      double* dmap = (b == current_idx) ? dcurrent.t.data.data() : nullptr;
      Tensor dzb = deform_attn_2d_backward(const_cast<Tensor&>(lc.z), cache.refs, cache.targets[b],
                                           layer.tca.attn, lc.attn[b], dinc, dmap, nullptr);
      for (std::size_t i = 0; i < dz.numel(); ++i) dz.data[i] += dzb.data[i];
    }
    Tensor dres = layer_norm_backward(lc.ln, layer.tca.ln_g, layer.tca.ln_b, dz);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dres.data[i];
  }

  // query-init path: x0 was the current map's rows
  FeatureMap2D dx_map = rows_to_map(dx, h, w);
  for (std::size_t i = 0; i < dcurrent.t.numel(); ++i) dcurrent.t.data[i] += dx_map.t.data[i];
  return dcurrent;
}

TemporalConcat TemporalConcat::make(int embed_dim, int t_window) {
  if (t_window < 1) throw std::invalid_argument("temporal concat: window must be >= 1");
  TemporalConcat t;
  t.t_window = t_window;
  t.conv = Conv2D::make(embed_dim * t_window, embed_dim, 1, 1);
  return t;
}

FeatureMap2D TemporalConcat::forward(const FeatureMap2D& current, const BevHistory& buf, const EgoPose& pose_now,
                                     const BevGrid& grid, Cache* cache) const {
  const int c = current.channels(), h = current.height(), w = current.width();
  FeatureMap2D stacked(c * t_window, h, w);
  std::copy(current.t.data.begin(), current.t.data.end(), stacked.t.data.begin());
  int slot = 1;
  for (auto it = buf.entries.rbegin(); it != buf.entries.rend() && slot < t_window; ++it, ++slot) {
    FeatureMap2D aligned = align_history_bev(it->first, it->second, pose_now, grid);
    std::copy(aligned.t.data.begin(), aligned.t.data.end(),
              stacked.t.data.begin() + static_cast<std::size_t>(slot) * c * h * w);
  }
  FeatureMap2D out = conv.forward(stacked);
  if (cache) cache->stacked = std::move(stacked);
  return out;
}

FeatureMap2D TemporalConcat::backward(const Cache& cache, const FeatureMap2D& dout) {
  FeatureMap2D dstacked(cache.stacked.channels(), cache.stacked.height(), cache.stacked.width());
  conv.backward(cache.stacked, dout, &dstacked);
  const int c = dout.channels(), h = dout.height(), w = dout.width();
  FeatureMap2D dcurrent(c, h, w);
  std::copy(dstacked.t.data.begin(), dstacked.t.data.begin() + static_cast<std::size_t>(c) * h * w,
            dcurrent.t.data.begin());
  return dcurrent;
}

}  // namespace bevfuse

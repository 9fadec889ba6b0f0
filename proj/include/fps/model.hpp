#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "fps/attention.hpp"
#include "fps/core/conv.hpp"
#include "fps/core/fft.hpp"
#include "fps/core/norm.hpp"
#include "fps/core/ops.hpp"
#include "fps/core/params.hpp"
#include "fps/hefr.hpp"
#include "fps/io/config.hpp"
#include "fps/io/fpt1.hpp"
#include "fps/sdfn.hpp"

namespace fps {

struct ModelConfig {
  int base_channels = 16;
  std::vector<int> blocks = {1, 2, 2, 1};
  int hefr_stages = 4;
  std::vector<int> heads = {1, 2, 4, 8};
  int pyramid_levels = 3;
  int groups = 4;
  int ffn_ratio = 2;
  int expert_hidden = 32;
  double hash_r = 1.0;
  bool normalize_scores = false;
  int attention_cap = kDefaultAttentionCap;
  bool fmam_on = true, spam_on = true, sdfn_on = true, hefr_on = true;

  [[nodiscard]] int levels() const { return static_cast<int>(blocks.size()); }
  [[nodiscard]] int channels(int level) const { return base_channels << level; }

  void validate() const {
    if (base_channels < 1) throw ConfigError("base_channels must be positive");
    if (blocks.empty() || heads.size() != blocks.size())
      throw ConfigError("blocks and heads must list one entry per level");
    for (int l = 0; l < levels(); ++l) {
      if (blocks[l] < 0) throw ConfigError("blocks must be non-negative");
      if (heads[l] < 1 || channels(l) % heads[l] != 0)
        throw ConfigError("level " + std::to_string(l + 1) + ": " + std::to_string(channels(l)) +
                          " channels not divisible by " + std::to_string(heads[l]) + " heads");
    }
    if (hefr_stages < 0 || pyramid_levels < 1 || groups < 1 || ffn_ratio < 1 || expert_hidden < 1)
      throw ConfigError("hefr_stages, pyramid_levels, groups, ffn_ratio and expert_hidden out of range");
    if (!(hash_r > 0.0)) throw ConfigError("hash_r must be positive");
    if (attention_cap < 1) throw ConfigError("attention_cap must be positive");
  }

  /// Checks the input extent against the level layout and the attention cap.
  void check_resolution(int h, int w) const {
    if (!is_power_of_two(h) || !is_power_of_two(w) || h < 16 || w < 16)
      throw ConfigError("image extents " + std::to_string(h) + "x" + std::to_string(w) +
                        " must be powers of two of at least 16");
    if ((h >> (levels() - 1)) < 1 || (w >> (levels() - 1)) < 1)
      throw ConfigError("image too small for " + std::to_string(levels()) + " levels");
    if (fmam_on || !spam_on) {
      for (int l = 0; l < levels(); ++l) {
        const long j = static_cast<long>(h >> l) * (w >> l);
        if (blocks[l] > 0 && j > attention_cap)
          throw ConfigError("level " + std::to_string(l + 1) + " has " + std::to_string(j) +
                            " tokens, above the attention cap " + std::to_string(attention_cap) +
                            "; reduce the resolution");
      }
    }
  }

  [[nodiscard]] std::string variant() const {
    if (fmam_on && spam_on && sdfn_on && hefr_on) return "full";
    std::string s;
    for (auto [on, name] : {std::pair{fmam_on, "fmam"}, {spam_on, "spam"}, {sdfn_on, "sdfn"}, {hefr_on, "hefr"}})
      if (!on) s += (s.empty() ? "no_" : "+no_") + std::string(name);
    return s;
  }
};

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream o;
  o << "base_channels = " << c.base_channels << "\n"
    << "blocks = " << join_ints(c.blocks) << "\n"
    << "hefr_stages = " << c.hefr_stages << "\n"
    << "heads = " << join_ints(c.heads) << "\n"
    << "pyramid_levels = " << c.pyramid_levels << "\n"
    << "groups = " << c.groups << "\n"
    << "ffn_ratio = " << c.ffn_ratio << "\n"
    << "expert_hidden = " << c.expert_hidden << "\n"
    << "hash_r = " << format_double(c.hash_r) << "\n"
    << "normalize_scores = " << c.normalize_scores << "\n"
    << "attention_cap = " << c.attention_cap << "\n"
    << "fmam = " << c.fmam_on << "\n"
    << "spam = " << c.spam_on << "\n"
    << "sdfn = " << c.sdfn_on << "\n"
    << "hefr = " << c.hefr_on << "\n";
  return o.str();
}

/// Applies one config entry; returns false when the key is not a model key.
inline bool apply_model_key(ModelConfig& c, const ConfigEntry& e) {
  const std::string& k = e.key;
  if (k == "base_channels") c.base_channels = parse_number<int>(e);
  else if (k == "blocks") c.blocks = parse_int_list(e);
  else if (k == "hefr_stages") c.hefr_stages = parse_number<int>(e);
  else if (k == "heads") c.heads = parse_int_list(e);
  else if (k == "pyramid_levels") c.pyramid_levels = parse_number<int>(e);
  else if (k == "groups") c.groups = parse_number<int>(e);
  else if (k == "ffn_ratio") c.ffn_ratio = parse_number<int>(e);
  else if (k == "expert_hidden") c.expert_hidden = parse_number<int>(e);
  else if (k == "hash_r") c.hash_r = parse_number<double>(e);
  else if (k == "normalize_scores") c.normalize_scores = parse_bool(e);
  else if (k == "attention_cap") c.attention_cap = parse_number<int>(e);
  else if (k == "fmam") c.fmam_on = parse_bool(e);
  else if (k == "spam") c.spam_on = parse_bool(e);
  else if (k == "sdfn") c.sdfn_on = parse_bool(e);
  else if (k == "hefr") c.hefr_on = parse_bool(e);
  else return false;
  return true;
}

inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig c;
  for (const auto& e : parse_key_values(text))
    if (!apply_model_key(c, e)) throw ConfigError("unknown model config key '" + e.key + "'");
  c.validate();
  return c;
}

// ----------------------------------------------------------------- blocks

template <class T>
struct FpsBlockWeights {
  Tensor<T> ln_gamma, ln_beta;
  FmamWeights<T> fmam;
  MsaWeights<T> msa;
  HashParams<T> hash;
  FusionWeights<T> fusion;
  SdfnWeights<T> sdfn;
  FeedForwardWeights<T> ffn;
};

template <class T>
FpsBlockWeights<T> make_fps_block_weights(ParamStore<T>& s, const std::string& p, int c, int heads,
                                          const ModelConfig& cfg) {
  FpsBlockWeights<T> w;
  w.ln_gamma = s.ones(p + ".ln.g", {c});
  w.ln_beta = s.zeros(p + ".ln.b", {c});
  if (cfg.fmam_on) w.fmam = make_fmam_weights(s, p + ".fmam", c, heads, cfg.pyramid_levels);
  w.msa = make_msa_weights(s, p + ".msa", c, heads);
  if (cfg.spam_on) w.hash = make_hash_params(s, p + ".hash", c, cfg.hash_r);
  w.fusion = make_fusion_weights(s, p + ".fuse", c);
  if (cfg.sdfn_on)
    w.sdfn = make_sdfn_weights(s, p + ".sdfn", c, cfg.ffn_ratio);
  else
    w.ffn = make_ffn_weights(s, p + ".ffn", c, cfg.ffn_ratio);
  return w;
}

/// f' = f_in + fuse(P(LN f_in), F(LN f_in)); f_out = SDFN(f'), whose internal
/// LayerNorm and residual supply f' + S(LN f').
template <class T>
Tensor<T> fps_block(const Tensor<T>& f_in, const FpsBlockWeights<T>& w, const ModelConfig& cfg) {
  Tensor<T> x = layer_norm(f_in, w.ln_gamma, w.ln_beta);
  Tensor<T> f_p = cfg.spam_on ? spam_forward(x, w.msa, w.hash, cfg.groups) : dense_msa(x, w.msa, cfg.attention_cap);
  Tensor<T> f_f = f_p;
  if (cfg.fmam_on) {
    FmamOptions opt;
    opt.sigmas = default_sigmas(cfg.pyramid_levels);
    opt.normalize = cfg.normalize_scores;
    opt.cap = cfg.attention_cap;
    f_f = fmam_forward(x, w.fmam, opt);
  }
  Tensor<T> f1 = add(f_in, fuse(f_p, f_f, w.fusion));
  return cfg.sdfn_on ? sdfn_forward(f1, w.sdfn) : ffn_forward(f1, w.ffn);
}

// ------------------------------------------------------------------ model

template <class T>
struct ConvWeights {
  Tensor<T> kernel, bias;
};

template <class T>
ConvWeights<T> make_conv(ParamStore<T>& s, const std::string& p, int c_out, int c_in, int k) {
  return {s.param(p + ".w", {c_out, c_in, k, k}, c_in * k * k), s.zeros(p + ".b", {c_out})};
}

template <class T>
Tensor<T> apply_conv(const Tensor<T>& x, const ConvWeights<T>& w, ConvOptions opt = {}) {
  return conv2d(x, w.kernel, &w.bias, opt);
}

template <class T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> store;
  ConvWeights<T> embed, head;
  std::vector<HefrWeights<T>> hefr_in, hefr_out;
  std::vector<std::vector<FpsBlockWeights<T>>> enc, dec;
  std::vector<ConvWeights<T>> down, up, reduce;  // down[l]: l -> l+1; up[l], reduce[l]: l+1 -> l
};

/// Creates missing parameters in `store` (seeded by the store) and binds
/// every view. A store restored from a checkpoint must contain exactly the
/// entries this configuration needs.
template <class T>
Model<T> build_model(const ModelConfig& cfg, ParamStore<T> store) {
  cfg.validate();
  const std::size_t preexisting = store.params().size() + store.buffers().size();
  Model<T> m;
  m.cfg = cfg;
  m.store = std::move(store);
  auto& s = m.store;
  const int c0 = cfg.base_channels;
  m.embed = make_conv(s, "embed", c0, 2, 3);
  const int stages = cfg.hefr_on ? cfg.hefr_stages : 0;
  for (int i = 0; i < stages; ++i) {
    m.hefr_in.push_back(make_hefr_weights(s, "hefr_in." + std::to_string(i), c0, cfg.expert_hidden));
    m.hefr_out.push_back(make_hefr_weights(s, "hefr_out." + std::to_string(i), c0, cfg.expert_hidden));
  }
  const int levels = cfg.levels();
  m.enc.resize(levels);
  m.dec.resize(levels);
  for (int l = 0; l < levels; ++l) {
    const int c = cfg.channels(l);
    for (int b = 0; b < cfg.blocks[l]; ++b) {
      const std::string tag = std::to_string(l + 1) + "." + std::to_string(b);
      m.enc[l].push_back(make_fps_block_weights(s, "enc" + tag, c, cfg.heads[l], cfg));
      m.dec[l].push_back(make_fps_block_weights(s, "dec" + tag, c, cfg.heads[l], cfg));
    }
    if (l + 1 < levels) {
      const std::string n = std::to_string(l + 1);
      m.down.push_back(make_conv(s, "down" + n, cfg.channels(l + 1), c, 3));
      m.up.push_back(make_conv(s, "up" + n, c, cfg.channels(l + 1), 1));
      m.reduce.push_back(make_conv(s, "reduce" + n, c, 2 * c, 1));
    }
  }
  m.head = make_conv(s, "head", 2, c0, 3);
  if (preexisting != 0) {
    if (const auto extra = s.unbound(); !extra.empty())
      throw ConfigError("checkpoint tensor '" + extra.front() + "' is not used by the model configuration");
    if (preexisting != s.params().size() + s.buffers().size())
      throw ConfigError("checkpoint is missing tensors required by the model configuration");
  }
  return m;
}

template <class T>
Model<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  return build_model(cfg, ParamStore<T>(seed));
}

/// Number of trainable scalars.
template <class T>
std::size_t count_params(const ParamStore<T>& s) {
  return s.count();
}

// --------------------------------------------------------- data consistency

/// [N,1,H,W] binary mask repeated over the real and imaginary planes.
template <class T>
Tensor<T> expand_mask(const Tensor<T>& mask) {
  require_rank(mask, 4, "mask");
  if (mask.dim(1) != 1) throw ShapeError("mask must have one channel, got " + std::to_string(mask.dim(1)));
  const std::size_t hw = static_cast<std::size_t>(mask.dim(2)) * mask.dim(3);
  std::vector<T> out(2 * mask.numel());
  for (int n = 0; n < mask.dim(0); ++n)
    for (int c = 0; c < 2; ++c) std::copy_n(mask.values().data() + n * hw, hw, out.data() + (2 * n + c) * hw);
  return Tensor<T>::from({mask.dim(0), 2, mask.dim(2), mask.dim(3)}, std::move(out));
}

/// k = F(x); k' = mask*y + (1-mask)*k; return F^-1(k'). The gradient reaches
/// x only through unsampled frequencies.
template <class T>
Tensor<T> data_consistency(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& mask) {
  require_rank(x, 4, "data_consistency");
  if (y.shape() != x.shape())
    throw ShapeError("data_consistency: k-space " + shape_str(y.shape()) + " does not match image " +
                     shape_str(x.shape()));
  if (mask.dim(0) != x.dim(0) || mask.dim(2) != x.dim(2) || mask.dim(3) != x.dim(3))
    throw ShapeError("data_consistency: mask " + shape_str(mask.shape()) + " does not match image " +
                     shape_str(x.shape()));
  const Tensor<T> m2 = expand_mask(mask);
  std::vector<T> keep(m2.numel()), measured(m2.numel());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const T mv = m2.values()[i];
    if (mv != T(0) && mv != T(1)) throw std::invalid_argument("data_consistency: mask must be binary");
    keep[i] = T(1) - mv;
    measured[i] = mv * y.values()[i];
  }
  Tensor<T> k = mul(fft2(x), Tensor<T>::from(x.shape(), std::move(keep)));
  return ifft2(add(k, Tensor<T>::from(x.shape(), std::move(measured))));
}

// ----------------------------------------------------------------- forward

template <class T>
struct ForwardTrace {
  Tensor<T> bottleneck;  // deepest encoder level after its last FPS block
};

template <class T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& zero_filled, const Tensor<T>& y, const Tensor<T>& mask,
                  ForwardTrace<T>* trace = nullptr) {
  const ModelConfig& cfg = m.cfg;
  require_rank(zero_filled, 4, "forward input");
  if (zero_filled.dim(1) != 2) throw ShapeError("forward: input must have 2 channels (real, imaginary)");
  cfg.check_resolution(zero_filled.dim(2), zero_filled.dim(3));

  Tensor<T> x = apply_conv(zero_filled, m.embed);
  for (const auto& h : m.hefr_in) x = hefr_forward(x, h);
  const int levels = cfg.levels();
  std::vector<Tensor<T>> skips;
  for (int l = 0; l < levels; ++l) {
    for (const auto& b : m.enc[l]) x = fps_block(x, b, cfg);
    if (l + 1 < levels) {
      skips.push_back(x);
      x = apply_conv(x, m.down[l], {.stride = 2});
    }
  }
  if (trace) trace->bottleneck = x;
  for (int l = levels - 1; l >= 0; --l) {
    if (l + 1 < levels) {
      x = apply_conv(upsample_nearest2x(x), m.up[l]);
      x = apply_conv(concat_channels<T>({x, skips[l]}), m.reduce[l]);
    }
    for (const auto& b : m.dec[l]) x = fps_block(x, b, cfg);
  }
  for (const auto& h : m.hefr_out) x = hefr_forward(x, h);
  x = add(apply_conv(x, m.head), zero_filled);
  return data_consistency(x, y, mask);
}

// -------------------------------------------------------------- checkpoint

inline constexpr std::string_view kCheckpointMagic = "FPSCKPT1\n";

/// Layout: magic line, "config <bytes>" line and the config text, then one
/// "tensor <name> <trainable> <bytes>" line followed by an FPT1 record per
/// entry, in name order.
template <class T>
std::string encode_checkpoint(const Model<T>& m) {
  std::string out(kCheckpointMagic);
  const std::string cfg = model_config_text(m.cfg);
  out += "config " + std::to_string(cfg.size()) + "\n" + cfg;
  auto emit = [&](const std::map<std::string, Tensor<T>>& map, int trainable) {
    for (const auto& [name, t] : map) {
      const std::string rec = encode_fpt1<T>(t.shape(), t.data());
      out += "tensor " + name + " " + std::to_string(trainable) + " " + std::to_string(rec.size()) + "\n" + rec;
    }
  };
  emit(m.store.params(), 1);
  emit(m.store.buffers(), 0);
  return out;
}

template <class T>
Model<T> decode_checkpoint(const std::string& bytes) {
  if (bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) throw IoError("not a checkpoint file");
  std::size_t pos = kCheckpointMagic.size();
  auto line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw IoError("checkpoint: truncated header");
    std::string l = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return l;
  };
  std::istringstream head(line());
  std::string tag;
  std::size_t len = 0;
  if (!(head >> tag >> len) || tag != "config" || pos + len > bytes.size()) throw IoError("checkpoint: bad config block");
  const ModelConfig cfg = parse_model_config(bytes.substr(pos, len));
  pos += len;
  ParamStore<T> store;
  while (pos < bytes.size()) {
    std::istringstream rec(line());
    std::string name;
    int trainable = 0;
    if (!(rec >> tag >> name >> trainable >> len) || tag != "tensor") throw IoError("checkpoint: bad tensor header");
    std::size_t p = pos;
    Fpt1Blob blob = decode_fpt1(bytes, p);
    if (p != pos + len) throw IoError("checkpoint: record length mismatch for " + name);
    pos = p;
    store.insert(name, Tensor<T>::from(blob.shape, std::vector<T>(blob.values.begin(), blob.values.end())),
                 trainable != 0);
  }
  return build_model(cfg, std::move(store));
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& m) {
  write_file(path, encode_checkpoint(m));
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file(path));
}

}  // namespace fps

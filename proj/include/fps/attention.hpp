#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "fps/core/conv.hpp"
#include "fps/core/ops.hpp"
#include "fps/core/params.hpp"
#include "fps/pyramid.hpp"

namespace fps {

inline constexpr int kDefaultAttentionCap = 4096;

// ---------------------------------------------------------------- weights

template <class T>
struct FmamWeights {
  std::vector<Tensor<T>> query;  // per level, [C, C] stored [out, in]
  std::vector<Tensor<T>> key;
  Tensor<T> value;   // [C, C]
  Tensor<T> output;  // [C, C]
  int heads = 1;
};

template <class T>
struct HashParams {
  Tensor<T> a;  // [C]
  T b = T(0);
  T r = T(1);
};

template <class T>
struct MsaWeights {
  Tensor<T> query, key, value;  // [C, C]; head i uses rows i*d .. (i+1)*d
  Tensor<T> output;             // [C, C]; column block i is W_i
  int heads = 1;
};

template <class T>
struct FusionWeights {
  Tensor<T> depthwise, depthwise_bias;  // [2C,1,3,3], [2C]
  Tensor<T> pointwise, pointwise_bias;  // [C,2C,1,1], [C]
};

template <class T>
FmamWeights<T> make_fmam_weights(ParamStore<T>& s, const std::string& prefix, int c, int heads, int levels) {
  if (heads <= 0 || c % heads != 0)
    throw std::invalid_argument(prefix + ": channels " + std::to_string(c) + " not divisible by heads " +
                                std::to_string(heads));
  FmamWeights<T> w;
  for (int m = 0; m < levels; ++m) {
    w.query.push_back(s.param(prefix + ".q" + std::to_string(m), {c, c}, c));
    w.key.push_back(s.param(prefix + ".k" + std::to_string(m), {c, c}, c));
  }
  w.value = s.param(prefix + ".v", {c, c}, c);
  w.output = s.param(prefix + ".o", {c, c}, c);
  w.heads = heads;
  return w;
}

template <class T>
MsaWeights<T> make_msa_weights(ParamStore<T>& s, const std::string& prefix, int c, int heads) {
  if (heads <= 0 || c % heads != 0)
    throw std::invalid_argument(prefix + ": channels " + std::to_string(c) + " not divisible by heads " +
                                std::to_string(heads));
  return {s.param(prefix + ".q", {c, c}, c), s.param(prefix + ".k", {c, c}, c), s.param(prefix + ".v", {c, c}, c),
          s.param(prefix + ".o", {c, c}, c), heads};
}

/// a ~ N(0,1) per channel, b ~ U(0, r); frozen buffers.
template <class T>
HashParams<T> make_hash_params(ParamStore<T>& s, const std::string& prefix, int c, double r = 1.0) {
  HashParams<T> hp;
  hp.a = s.buffer(prefix + ".a", {c}, [](Rng& rng, std::span<T> v) {
    for (auto& x : v) x = static_cast<T>(rng.normal());
  });
  hp.b = s.buffer(prefix + ".b", {1}, [r](Rng& rng, std::span<T> v) { v[0] = static_cast<T>(rng.uniform(0.0, r)); })
             .item();
  hp.r = static_cast<T>(r);
  return hp;
}

template <class T>
FusionWeights<T> make_fusion_weights(ParamStore<T>& s, const std::string& prefix, int c) {
  return {s.param(prefix + ".dw", {2 * c, 1, 3, 3}, 9), s.zeros(prefix + ".dw_b", {2 * c}),
          s.param(prefix + ".pw", {c, 2 * c, 1, 1}, 2 * c), s.zeros(prefix + ".pw_b", {c})};
}

// ------------------------------------------------------------------- FMAM

struct FmamOptions {
  std::vector<double> sigmas = default_sigmas(3);
  bool normalize = false;  // divide the summed scores by M*I
  int cap = kDefaultAttentionCap;
};

inline void check_attention_size(int j, int cap, const std::string& where) {
  if (j > cap)
    throw std::invalid_argument(where + ": " + std::to_string(j) + " tokens exceed the attention cap of " +
                                std::to_string(cap) + "; reduce the image resolution or raise the cap");
}

/// Summed per-level attention maps S = sum_m sum_i softmax(Q_m^i K_m^i^T / sqrt(d)),
/// shape [N, J, J].
template <class T>
Tensor<T> fmam_scores(const Tensor<T>& f_in, const FmamWeights<T>& w, const FmamOptions& opt) {
  require_rank(f_in, 4, "fmam_forward");
  const int c = f_in.dim(1);
  const int levels = static_cast<int>(opt.sigmas.size()) - 1;
  if (levels != static_cast<int>(w.query.size()))
    throw std::invalid_argument("fmam_forward: " + std::to_string(w.query.size()) + " level projections but " +
                                std::to_string(opt.sigmas.size()) + " sigmas");
  if (c % w.heads != 0) throw ShapeError("fmam_forward: channels not divisible by heads");
  check_attention_size(f_in.dim(2) * f_in.dim(3), opt.cap, "fmam_forward");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(c / w.heads));

  FrequencyPyramid<T> pyr = frequency_pyramid(f_in, opt.sigmas);
  std::vector<Tensor<T>> maps;
  for (int m = 0; m < levels; ++m) {
    Tensor<T> tok = to_tokens(pyr.levels[m]);
    Tensor<T> q = split_heads(linear(tok, w.query[m]), w.heads);
    Tensor<T> k = split_heads(linear(tok, w.key[m]), w.heads);
    maps.push_back(attention_probs(q, k, inv_sqrt_d));
  }
  Tensor<T> total = sum_heads(maps, w.heads);
  if (opt.normalize) total = scale(total, T(1) / static_cast<T>(levels * w.heads));
  return total;
}

template <class T>
Tensor<T> fmam_forward(const Tensor<T>& f_in, const FmamWeights<T>& w, const FmamOptions& opt = {}) {
  Tensor<T> s = fmam_scores(f_in, w, opt);
  Tensor<T> v = linear(to_tokens(f_in), w.value);
  return from_tokens(linear(bmm(s, v), w.output), f_in.dim(2), f_in.dim(3));
}

// ------------------------------------------------------------------- SPAM

/// Z_j = floor((a . f_j + b) / r) for every row of a [J, C] token matrix.
template <class T>
std::vector<std::int64_t> hash_tokens(std::span<const T> tokens, int c, const HashParams<T>& hp) {
  if (hp.a.numel() != static_cast<std::size_t>(c)) throw ShapeError("hash_tokens: projection length != channels");
  const std::size_t j = tokens.size() / c;
  std::vector<std::int64_t> codes(j);
  const auto& a = hp.a.values();
  for (std::size_t t = 0; t < j; ++t) {
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += static_cast<double>(a[k]) * tokens[t * c + k];
    codes[t] = static_cast<std::int64_t>(std::floor((s + hp.b) / hp.r));
  }
  return codes;
}

/// Sorted order of J tokens split into `groups` consecutive chunks of g
/// slots. order[slot] is the source token, or -1 for a zero pad.
struct Grouping {
  std::vector<std::int64_t> order;
  int group_size = 0;
  int groups = 0;
  int pad = 0;

  [[nodiscard]] bool is_pad(std::size_t slot) const { return order[slot] < 0; }
};

inline Grouping make_grouping(const std::vector<std::int64_t>& codes, int groups) {
  if (groups < 1) throw std::invalid_argument("group count must be at least 1");
  const int j = static_cast<int>(codes.size());
  Grouping g;
  g.groups = groups;
  g.group_size = (j + groups - 1) / groups;
  g.pad = g.group_size * groups - j;
  g.order = stable_argsort<std::int64_t>(codes);
  g.order.resize(static_cast<std::size_t>(g.group_size) * groups, -1);
  return g;
}

/// Scaled dot-product multi-head attention inside each of B independent
/// token sets [B, L, C]. pad[b*L + l] marks keys excluded from the softmax.
template <class T>
Tensor<T> msa(const Tensor<T>& tokens, const MsaWeights<T>& w, const std::vector<char>* pad = nullptr) {
  require_rank(tokens, 3, "msa");
  const int b = tokens.dim(0), l = tokens.dim(1), c = tokens.dim(2), heads = w.heads;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(c / heads));
  Tensor<T> q = split_heads(linear(tokens, w.query), heads);
  Tensor<T> k = split_heads(linear(tokens, w.key), heads);
  Tensor<T> v = split_heads(linear(tokens, w.value), heads);
  Tensor<T> probs;
  if (pad) {
    // Flags are per token set; every head of a set shares them.
    std::vector<char> flags(static_cast<std::size_t>(b) * heads * l);
    for (int bb = 0; bb < b; ++bb)
      for (int i = 0; i < heads; ++i)
        std::copy_n(pad->begin() + static_cast<std::ptrdiff_t>(bb) * l, l,
                    flags.begin() + (static_cast<std::ptrdiff_t>(bb) * heads + i) * l);
    probs = attention_probs(q, k, inv_sqrt_d, &flags);
  } else {
    probs = attention_probs(q, k, inv_sqrt_d);
  }
  return linear(merge_heads(bmm(probs, v), heads), w.output);
}

/// Global MSA over all J tokens of a feature map.
template <class T>
Tensor<T> dense_msa(const Tensor<T>& x, const MsaWeights<T>& w, int cap = kDefaultAttentionCap) {
  require_rank(x, 4, "dense_msa");
  check_attention_size(x.dim(2) * x.dim(3), cap, "dense_msa");
  return from_tokens(msa(to_tokens(x), w), x.dim(2), x.dim(3));
}

/// Grouped tokens [N*G, g, C] plus the routing needed to undo the grouping.
template <class T>
struct GroupedTokens {
  Tensor<T> groups;
  std::vector<Grouping> per_item;
  std::vector<std::int64_t> rows;  // flat source row of each slot, -1 for pads
  std::vector<char> pad;
};

/// Hashes the tokens of every batch item, sorts them stably by code and
/// gathers them into equal consecutive groups.
template <class T>
GroupedTokens<T> group_tokens(const Tensor<T>& tokens, const HashParams<T>& hp, int groups) {
  require_rank(tokens, 3, "group_tokens");
  const int n = tokens.dim(0), j = tokens.dim(1), c = tokens.dim(2);
  GroupedTokens<T> out;
  for (int b = 0; b < n; ++b) {
    auto codes = hash_tokens(tokens.data().subspan(static_cast<std::size_t>(b) * j * c, static_cast<std::size_t>(j) * c),
                             c, hp);
    Grouping g = make_grouping(codes, groups);
    for (auto idx : g.order) {
      out.rows.push_back(idx < 0 ? -1 : static_cast<std::int64_t>(b) * j + idx);
      out.pad.push_back(idx < 0);
    }
    out.per_item.push_back(std::move(g));
  }
  const int gs = out.per_item.front().group_size;
  out.groups = reshape(gather_rows(reshape(tokens, {n * j, c}), out.rows), {n * groups, gs, c});
  return out;
}

/// Scatters grouped tokens back to their original positions; pads are dropped.
template <class T>
Tensor<T> ungroup_tokens(const Tensor<T>& grouped, const GroupedTokens<T>& route, int n, int j) {
  const int c = grouped.dim(-1);
  return reshape(scatter_rows(reshape(grouped, {static_cast<int>(route.rows.size()), c}), route.rows, n * j), {n, j, c});
}

template <class T>
Tensor<T> within_group_msa(const Tensor<T>& groups, const MsaWeights<T>& w, const std::vector<char>& pad) {
  bool any = false;
  for (char p : pad) any = any || p;
  return msa(groups, w, any ? &pad : nullptr);
}

/// flatten -> hash -> group -> inner -> unsort -> reshape. `inner` maps the
/// grouped tensor [N*G, g, C] and its pad flags to a same-shape tensor.
template <class T, class Inner>
Tensor<T> spam_route(const Tensor<T>& x, const HashParams<T>& hp, int groups, Inner&& inner) {
  require_rank(x, 4, "spam_forward");
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  GroupedTokens<T> g = group_tokens(to_tokens(x), hp, groups);
  Tensor<T> y = inner(g.groups, g.pad);
  return from_tokens(ungroup_tokens(y, g, n, h * w), h, w);
}

template <class T>
Tensor<T> spam_forward(const Tensor<T>& x, const MsaWeights<T>& w, const HashParams<T>& hp, int groups) {
  return spam_route(x, hp, groups,
                    [&](const Tensor<T>& gt, const std::vector<char>& pad) { return within_group_msa(gt, w, pad); });
}

// ----------------------------------------------------------------- fusion

/// concat [F_p, F_f] -> depthwise 3x3 over 2C -> pointwise 1x1 to C.
template <class T>
Tensor<T> fuse(const Tensor<T>& f_p, const Tensor<T>& f_f, const FusionWeights<T>& w) {
  if (f_p.shape() != f_f.shape())
    throw ShapeError("fuse: branch shapes differ, " + shape_str(f_p.shape()) + " vs " + shape_str(f_f.shape()));
  const int c2 = 2 * f_p.dim(1);
  Tensor<T> z = conv2d(concat_channels<T>({f_p, f_f}), w.depthwise, &w.depthwise_bias, {.groups = c2});
  return conv2d(z, w.pointwise, &w.pointwise_bias);
}

// -------------------------------------------------------------- op counts

struct AttentionOpCount {
  std::uint64_t dense = 0;
  std::uint64_t fmam = 0;
  std::uint64_t spam = 0;
};

/// Multiply-accumulates spent in the attention products (scores and
/// score-times-value) for one feature map. FMAM forms M score maps but
/// applies their sum to V once.
inline AttentionOpCount attention_op_count(std::uint64_t j, std::uint64_t c, int groups, int levels) {
  const std::uint64_t g = (j + groups - 1) / groups;
  AttentionOpCount n;
  n.dense = 2 * j * j * c;
  n.spam = 2 * static_cast<std::uint64_t>(groups) * g * g * c;
  n.fmam = (static_cast<std::uint64_t>(levels) + 1) * j * j * c;
  return n;
}

}  // namespace fps

#include <cmath>

#include "inheritlab/error.hpp"
#include "inheritlab/nanolm.hpp"

namespace ilab {

namespace {

// Residual coordinate layout of the planted model.
constexpr std::size_t kOut = 0;         // answer bit
constexpr std::size_t kCat = 1;         // 12 dims: category code of a category noun
constexpr std::size_t kMem = 13;        // 12 dims: category code of a member noun
constexpr std::size_t kPremTag = 25;    // positional tag of the premise slot
constexpr std::size_t kConcTag = 26;    // positional tag of the conclusion slot
constexpr std::size_t kQuery = 27;      // positional tag of the answer position
constexpr std::size_t kX = 28;          // 12 dims: category code read from the premise
constexpr std::size_t kY = 40;          // 12 dims: category code read from the conclusion
constexpr std::size_t kOutBalance = 58;
constexpr std::size_t kPosFill = 59;
constexpr std::size_t kTokFill = 60;
constexpr std::size_t kAttBalance = 61;
constexpr std::size_t kPosBalance = 62;
constexpr std::size_t kTokBalance = 63;
constexpr std::size_t kCodes = 12;

constexpr double kTokNormSq = 40.0;
constexpr double kPosNormSq = 24.0;
constexpr double kAttn = 16.0;     // query/key gain
constexpr double kSlope = 20.0;    // MLP detector slope
constexpr double kOutMag = 10.0;   // magnitude written to the answer bit
constexpr double kLnEps = 1e-5;

// Completes a row so that its entries sum to zero and its squared norm is
// `norm_sq`, using the two spare coordinates `fill` and `balance`.
void complete_row(std::span<double> row, std::size_t fill, std::size_t balance, double norm_sq) {
  double s = 0.0, q = 0.0;
  for (double v : row) {
    s += v;
    q += v * v;
  }
  const double w2 = 2.0 * (norm_sq - q) - s * s;
  require(w2 >= 0.0, "planted model: feature row too large to normalise");
  const double w = std::sqrt(w2);
  row[fill] = (-s + w) / 2.0;
  row[balance] = (-s - w) / 2.0;
}

}  // namespace

TransformerModel build_planted_model(const ModelConfig& config_in, Tokenizer tokenizer,
                                     const PlantedSpec& spec) {
  ModelConfig cfg = config_in;
  require(cfg.n_layers >= 2, "planted model needs at least two layers");
  require(cfg.d_model >= 64, "planted model needs d_model >= 64");
  require(cfg.n_heads == 2, "planted model uses exactly two heads");
  require(cfg.d_model / cfg.n_heads >= kCodes, "planted model head width too small");
  require(cfg.ff() >= kCodes, "planted model needs at least 12 hidden units");
  require(spec.final_position < cfg.max_context, "planted model: final position beyond context");
  require(spec.premise_position < spec.final_position &&
              spec.conclusion_position < spec.final_position,
          "planted model: slots must precede the answer position");

  TransformerModel m = init_model(cfg, std::move(tokenizer));
  for (Tensor* t : m.parameters()) std::fill(t->values().begin(), t->values().end(), 0.0);
  const std::size_t d = cfg.d_model, dh = d / 2;

  for (auto [tok, c] : spec.category_tokens) {
    require(c >= 0 && static_cast<std::size_t>(c) < kCodes, "planted model supports 12 categories");
    m.tok_emb.at(static_cast<std::size_t>(tok), kCat + static_cast<std::size_t>(c)) = 1.0;
  }
  for (auto [tok, c] : spec.member_tokens) {
    require(c >= 0 && static_cast<std::size_t>(c) < kCodes, "planted model supports 12 categories");
    m.tok_emb.at(static_cast<std::size_t>(tok), kMem + static_cast<std::size_t>(c)) = 1.0;
  }
  for (std::size_t v = 0; v < m.config.vocab_size; ++v)
    complete_row(m.tok_emb.row(v), kTokFill, kTokBalance, kTokNormSq);
  m.pos_emb.at(spec.premise_position, kPremTag) = 1.0;
  m.pos_emb.at(spec.conclusion_position, kConcTag) = 1.0;
  m.pos_emb.at(spec.final_position, kQuery) = 1.0;
  for (std::size_t p = 0; p < cfg.max_context; ++p)
    complete_row(m.pos_emb.row(p), kPosFill, kPosBalance, kPosNormSq);

  // Every embedded row now has zero mean and the same norm, so the first
  // LayerNorm of the last block is a fixed rescaling by 1/sigma1.
  const double sigma1 = std::sqrt((kTokNormSq + kPosNormSq) / static_cast<double>(d) + kLnEps);
  Block& b = m.blocks.back();
  std::fill(b.ln1_g.values().begin(), b.ln1_g.values().end(), 1.0);
  std::fill(b.ln2_g.values().begin(), b.ln2_g.values().end(), 1.0);

  // Attention weight per slot at the answer position.
  double share;
  if (spec.order_sensitive) {
    // Head 0 reads the premise slot into X, head 1 the conclusion slot into Y.
    b.w_qkv.at(kQuery, 0) = kAttn;
    b.w_qkv.at(kPremTag, d) = kAttn;
    b.w_qkv.at(kQuery, dh) = kAttn;
    b.w_qkv.at(kConcTag, d + dh) = kAttn;
    for (std::size_t c = 0; c < kCodes; ++c) {
      b.w_qkv.at(kCat + c, 2 * d + c) = 1.0;
      b.w_qkv.at(kMem + c, 2 * d + dh + c) = 1.0;
      b.w_o.at(c, kX + c) = 1.0;
      b.w_o.at(dh + c, kY + c) = 1.0;
      b.w_o.at(c, kAttBalance) -= 1.0;
      b.w_o.at(dh + c, kAttBalance) -= 1.0;
    }
    share = 1.0;
  } else {
    // A single head averages both slots, so noun order cannot matter.
    b.w_qkv.at(kQuery, 0) = kAttn;
    b.w_qkv.at(kPremTag, d) = kAttn;
    b.w_qkv.at(kConcTag, d) = kAttn;
    for (std::size_t c = 0; c < kCodes; ++c) {
      b.w_qkv.at(kCat + c, 2 * d + c) = 1.0;
      b.w_qkv.at(kMem + c, 2 * d + kCodes + c) = 1.0;
      b.w_o.at(c, kX + c) = 1.0;
      b.w_o.at(kCodes + c, kY + c) = 1.0;
      b.w_o.at(c, kAttBalance) -= 1.0;
      b.w_o.at(kCodes + c, kAttBalance) -= 1.0;
    }
    share = 0.5;
  }

  // At the answer position X and Y each hold `a` in at most one coordinate.
  // The MLP detects X_c + Y_c well above a single-slot contribution.
  const double a = share / sigma1;
  const double base_sq = kTokNormSq + kPosNormSq;
  auto sigma2 = [&](double extra_sq) {
    return std::sqrt((base_sq + extra_sq) / static_cast<double>(d) + kLnEps);
  };
  const double both = 2.0 * a / sigma2(2.0 * a * a + 4.0 * a * a);
  const double single = a / sigma2(a * a + a * a);
  require(single < 0.6 * both, "planted model: detector margin too small");
  const double thr = 0.5 * (single + both);
  const double h_on = kernels::gelu(Tensor::scalar(kSlope * (both - thr))).item();
  for (std::size_t c = 0; c < kCodes; ++c) {
    b.w1.at(kX + c, c) = kSlope;
    b.w1.at(kY + c, c) = kSlope;
    b.b1[c] = -kSlope * thr;
    b.w2.at(c, kOut) = 2.0 * kOutMag / h_on;
    b.w2.at(c, kOutBalance) = -2.0 * kOutMag / h_on;
  }
  b.b2[kOut] = -kOutMag;
  b.b2[kOutBalance] = kOutMag;

  std::fill(m.lnf_g.values().begin(), m.lnf_g.values().end(), 1.0);
  const int yes = m.tokenizer.id("Yes"), no = m.tokenizer.id("No");
  m.w_out.at(kOut, static_cast<std::size_t>(yes)) = 1.0;
  m.w_out.at(kOut, static_cast<std::size_t>(no)) = -1.0;
  return m;
}

PlantedSite planted_site(const TransformerModel& m, const PlantedSpec& spec) {
  return {m.config.n_layers - 1, spec.final_position, kOut};
}

}  // namespace ilab

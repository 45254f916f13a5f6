#pragma once

// Mixed-guided attention.
//
// The makeup token first attends jointly with the prompt tokens; its output row
// becomes the updated makeup token. The latent sequence then cross-attends to
// three sources separately (prompt tokens, updated makeup token, identity
// token), and the three results are blended:
//
//   Z_out = lambda_text * Z_text + lambda_makeup * Z_makeup + lambda_id * Z_id
//
// A source whose weight is exactly zero is never evaluated, so the output is
// bit-for-bit independent of that source's inputs.

#include "mkup/layers.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>

namespace mkup {

inline constexpr int kAttentionHeads = 4;

struct GuidanceWeights {
  double text = 1.0;
  double makeup = 1.0;
  double id = 1.0;

  void validate() const {
    for (double v : {text, makeup, id})
      if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("guidance weights must be finite and non-negative");
  }
  GuidanceWeights scaled(double s) const { return {text * s, makeup * s, id * s}; }
  friend bool operator==(const GuidanceWeights&, const GuidanceWeights&) = default;
};

enum class AttentionStage { text, makeup, id };

template <typename Scalar>
struct MgaWeights {
  int heads = kAttentionHeads;
  AttentionWeights<Scalar> self_attn, text, makeup, id;

  static MgaWeights zeros(int dim) {
    MgaWeights w;
    w.self_attn = w.text = w.makeup = w.id = AttentionWeights<Scalar>::zeros(dim);
    return w;
  }

  static MgaWeights init(int dim, std::mt19937_64& rng) {
    const double std = 1.0 / std::sqrt(static_cast<double>(dim));
    MgaWeights w;
    w.self_attn = AttentionWeights<Scalar>::init(dim, std, rng);
    w.text = AttentionWeights<Scalar>::init(dim, std, rng);
    w.makeup = AttentionWeights<Scalar>::init(dim, std, rng);
    w.id = AttentionWeights<Scalar>::init(dim, std, rng);
    return w;
  }

  int dim() const { return static_cast<int>(text.query.rows()); }

  const AttentionWeights<Scalar>& stage(AttentionStage s) const {
    switch (s) {
      case AttentionStage::text: return text;
      case AttentionStage::makeup: return makeup;
      case AttentionStage::id: return id;
    }
    return text;
  }

  template <typename Visitor>
  void visit(const std::string& prefix, Visitor&& f) {
    self_attn.visit(prefix + ".self", f);
    text.visit(prefix + ".text", f);
    makeup.visit(prefix + ".makeup", f);
    id.visit(prefix + ".id", f);
  }
  template <typename Visitor>
  void visit(const std::string& prefix, Visitor&& f) const {
    self_attn.visit(prefix + ".self", f);
    text.visit(prefix + ".text", f);
    makeup.visit(prefix + ".makeup", f);
    id.visit(prefix + ".id", f);
  }
};

// Self-attention over [text tokens; makeup token]; returns the makeup row (1 x D).
template <typename Scalar>
Var<Scalar> self_update_makeup(const MgaWeights<Scalar>& w, Var<Scalar> text_tokens, Var<Scalar> makeup_token) {
  if (text_tokens.rows() < 1) throw ShapeError("self_update_makeup: prompt needs at least one token");
  if (makeup_token.rows() != 1) throw ShapeError("self_update_makeup: makeup embedding must be a single token");
  if (text_tokens.cols() != w.dim() || makeup_token.cols() != w.dim())
    throw ShapeError("self_update_makeup: token width mismatch");
  const auto seq = ad::concat_rows<Scalar>({text_tokens, makeup_token});
  const auto out = multi_head_attention(w.self_attn, seq, seq, w.heads);
  return ad::row_block(out, text_tokens.rows(), 1);
}

template <typename Scalar>
Var<Scalar> cross_attend(const MgaWeights<Scalar>& w, Var<Scalar> latent, Var<Scalar> tokens, AttentionStage stage) {
  if (tokens.rows() < 1) throw ShapeError("cross_attend: empty token sequence");
  return multi_head_attention(w.stage(stage), latent, tokens, w.heads);
}

// Weighted sum of the three attention outputs; terms with zero weight are skipped
// and may be left unset.
template <typename Scalar>
Var<Scalar> fuse(Tape<Scalar>& tape, const std::optional<Var<Scalar>>& z_text, const std::optional<Var<Scalar>>& z_makeup,
                 const std::optional<Var<Scalar>>& z_id, const GuidanceWeights& g, Eigen::Index rows,
                 Eigen::Index cols) {
  g.validate();
  std::optional<Var<Scalar>> acc;
  const auto term = [&](const std::optional<Var<Scalar>>& z, double lambda) {
    if (lambda == 0.0) return;
    if (!z) throw std::invalid_argument("fuse: missing term with non-zero weight");
    if (z->rows() != rows || z->cols() != cols) throw ShapeError("fuse: shape mismatch");
    auto scaled = ad::scale(*z, static_cast<Scalar>(lambda));
    acc = acc ? ad::add(*acc, scaled) : scaled;
  };
  term(z_text, g.text);
  term(z_makeup, g.makeup);
  term(z_id, g.id);
  return acc ? *acc : tape.constant(Matrix<Scalar>::Zero(rows, cols));
}

template <typename Scalar>
Var<Scalar> fuse(Var<Scalar> z_text, Var<Scalar> z_makeup, Var<Scalar> z_id, const GuidanceWeights& g) {
  if (z_text.rows() != z_makeup.rows() || z_text.rows() != z_id.rows() || z_text.cols() != z_makeup.cols() ||
      z_text.cols() != z_id.cols())
    throw ShapeError("fuse: shape mismatch");
  return fuse<Scalar>(*z_text.tape(), z_text, z_makeup, z_id, g, z_text.rows(), z_text.cols());
}

// Full block: makeup self-update, three cross-attentions, weighted fusion.
template <typename Scalar>
Var<Scalar> mga_block(const MgaWeights<Scalar>& w, Var<Scalar> latent, Var<Scalar> text_tokens,
                      Var<Scalar> makeup_token, Var<Scalar> identity_token, const GuidanceWeights& g) {
  g.validate();
  if (latent.cols() != w.dim()) throw ShapeError("mga_block: latent width mismatch");
  if (identity_token.rows() != 1 || identity_token.cols() != w.dim())
    throw ShapeError("mga_block: identity embedding must be a single token of the attention width");
  std::optional<Var<Scalar>> z_text, z_makeup, z_id;
  if (g.text != 0.0) z_text = cross_attend(w, latent, text_tokens, AttentionStage::text);
  if (g.makeup != 0.0) {
    const auto updated = self_update_makeup(w, text_tokens, makeup_token);
    z_makeup = cross_attend(w, latent, updated, AttentionStage::makeup);
  }
  if (g.id != 0.0) z_id = cross_attend(w, latent, identity_token, AttentionStage::id);
  return fuse(*latent.tape(), z_text, z_makeup, z_id, g, latent.rows(), latent.cols());
}

}  // namespace mkup

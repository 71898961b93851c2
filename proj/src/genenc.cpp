#include "mcti/genenc.hpp"

#include <cmath>

#include "mcti/error.hpp"

namespace mcti {

GeneEncoderParams::GeneEncoderParams(int chunk, int d_model, int heads, Rng& rng)
    : chunk_size(chunk), n_heads(heads) {
  if (chunk < 1 || heads < 1 || d_model % heads != 0)
    throw Error(Errc::InvalidConfig, "d_model must be divisible by the number of gene attention heads");
  chunk_proj = Linear("genenc.chunk_proj", chunk, d_model, rng);
  const int dh = d_model / heads;
  for (int h = 0; h < heads; ++h) {
    const std::string p = "genenc.head" + std::to_string(h);
    query.emplace_back(p + ".query", d_model, dh, rng, false);
    key.emplace_back(p + ".key", d_model, dh, rng, false);
    value.emplace_back(p + ".value", d_model, dh, rng, false);
  }
  output_proj = Linear("genenc.output_proj", d_model, d_model, rng);
}

void GeneEncoderParams::collect(ParamList& out) {
  chunk_proj.collect(out);
  for (int h = 0; h < n_heads; ++h) {
    query[h].collect(out);
    key[h].collect(out);
    value[h].collect(out);
  }
  output_proj.collect(out);
}

Matrix chunk_genes(const RowVector& gene_vector, int chunk_size) {
  const Eigen::Index g = gene_vector.size();
  if (g < 1) throw Error(Errc::ShapeMismatch, "empty gene vector");
  const Eigen::Index n_tokens = (g + chunk_size - 1) / chunk_size;
  Matrix chunks = Matrix::Zero(n_tokens, chunk_size);
  for (Eigen::Index j = 0; j < g; ++j) chunks(j / chunk_size, j % chunk_size) = gene_vector(j);
  return chunks;
}

ag::Var tokenize_genes(ag::Tape& tape, const RowVector& gene_vector, GeneEncoderParams& params) {
  return params.chunk_proj(tape, tape.constant(chunk_genes(gene_vector, params.chunk_size)));
}

ag::Var msa(ag::Tape& tape, const ag::Var& tokens, GeneEncoderParams& params) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(params.d_model() / params.n_heads));
  ag::Var heads;
  for (int h = 0; h < params.n_heads; ++h) {
    const ag::Var q = params.query[h](tape, tokens);
    const ag::Var k = params.key[h](tape, tokens);
    const ag::Var v = params.value[h](tape, tokens);
    const ag::Var att = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv_sqrt));
    const ag::Var out = ag::matmul(att, v);
    heads = h == 0 ? out : ag::concat_cols(heads, out);
  }
  return params.output_proj(tape, heads);
}

ag::Var gene_embedding(ag::Tape& tape, const RowVector& gene_vector, GeneEncoderParams& params) {
  return ag::mean_rows(msa(tape, tokenize_genes(tape, gene_vector, params), params));
}

ag::Var encode_genes(ag::Tape& tape, const RowVector& gene_vector, GeneEncoderParams& params, int k) {
  if (k < 1) throw Error(Errc::InvalidConfig, "k must be at least 1");
  return ag::replicate_rows(gene_embedding(tape, gene_vector, params), k);
}

Matrix tokenize_genes(const RowVector& gene_vector, GeneEncoderParams& params) {
  ag::Tape tape;
  return tokenize_genes(tape, gene_vector, params).value();
}

Matrix msa(const Matrix& tokens, GeneEncoderParams& params) {
  ag::Tape tape;
  return msa(tape, tape.constant(tokens), params).value();
}

GeneBag encode_genes(const RowVector& gene_vector, GeneEncoderParams& params, int k) {
  ag::Tape tape;
  return GeneBag{encode_genes(tape, gene_vector, params, k).value()};
}

}  // namespace mcti

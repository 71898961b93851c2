#pragma once

// Gene branch: contiguous chunks -> tokens -> multi-head self-attention ->
// mean pool -> replicated to the pathology bag size.

#include <vector>

#include "mcti/nn.hpp"

namespace mcti {

struct GeneEncoderParams {
  int chunk_size = 64;
  int n_heads = 4;
  Linear chunk_proj;  // chunk_size -> d_model
  std::vector<Linear> query, key, value;  // per head, d_model -> d_model / H, no bias
  Linear output_proj;                     // d_model -> d_model

  GeneEncoderParams() = default;
  GeneEncoderParams(int chunk_size, int d_model, int n_heads, Rng& rng);
  void collect(ParamList& out);
  int d_model() const { return static_cast<int>(chunk_proj.out_dim()); }
};

struct GeneBag {
  Matrix features;  // k × d_model, identical rows
};

Matrix chunk_genes(const RowVector& gene_vector, int chunk_size);

ag::Var tokenize_genes(ag::Tape& tape, const RowVector& gene_vector, GeneEncoderParams& params);
ag::Var msa(ag::Tape& tape, const ag::Var& tokens, GeneEncoderParams& params);
// 1 × d_model pooled embedding before replication.
ag::Var gene_embedding(ag::Tape& tape, const RowVector& gene_vector, GeneEncoderParams& params);
ag::Var encode_genes(ag::Tape& tape, const RowVector& gene_vector, GeneEncoderParams& params, int k);

Matrix tokenize_genes(const RowVector& gene_vector, GeneEncoderParams& params);
Matrix msa(const Matrix& tokens, GeneEncoderParams& params);
GeneBag encode_genes(const RowVector& gene_vector, GeneEncoderParams& params, int k);

}  // namespace mcti

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dask/image.hpp"
#include "dask/layers.hpp"

namespace dask {

/// Toy re-identification network: four stride-2 conv blocks, global average
/// pooling and a linear embedding, plus a per-step identity classifier.
struct ReidModel {
  std::vector<Conv> extractor;
  Dense embedding;
  Dense classifier;

  Index embedding_dim() const { return embedding.weight.shape()[0]; }
  Index num_classes() const { return classifier.weight.shape()[0]; }

  /// B x 3 x H x W -> B x d
  Var features(Tape& tape, const Var& images) const;
  /// B x d -> B x classes
  Var logits(Tape& tape, const Var& features) const { return classifier(tape, features); }

  std::vector<Var> extractor_parameters() const;
  std::vector<Var> parameters() const;
};

struct ReidArchitecture {
  std::vector<Index> channels{3, 16, 32, 64, 64};
  Index embedding_dim = 64;
};

ReidModel make_reid_model(const ReidArchitecture& arch, Index num_classes, Rng& rng);
ReidModel clone(const ReidModel& m);
/// Replaces the classifier with a freshly initialized d -> num_classes head.
void reset_classifier(ReidModel& m, Index num_classes, Rng& rng);

struct FeatureBatch {
  RowMatrix<double> features;  // B x d
  std::vector<int> labels;

  Index size() const { return features.rows(); }
};

/// Embeds images (clipped to [0,1]) in chunks of `chunk` without recording gradients.
FeatureBatch extract_features(const ReidModel& model, std::span<const Image> images,
                              std::span<const int> labels, Index chunk = 64);

/// Cosine similarity between all rows: normalize_rows(F) * normalize_rows(F)^T.
RowMatrix<double> similarity_matrix(const FeatureBatch& fb);
Var similarity_matrix(Tape& tape, const Var& features);

/// Mean over rows of KL(softmax(S_old_i / tau) || softmax(S_new_i / tau)).
/// The teacher side is a constant.
Var skd_loss(Tape& tape, const RowMatrix<double>& s_old, const Var& s_new, double tau);
double skd_loss(const RowMatrix<double>& s_old, const RowMatrix<double>& s_new, double tau);

double triplet_loss(const FeatureBatch& fb, double margin);

/// Triplet + cross-entropy, unweighted.
Var reid_loss(Tape& tape, const Var& features, const Var& logits, std::span<const int> labels,
              double margin);
double reid_loss(const FeatureBatch& fb, const RowMatrix<double>& logits, double margin);

struct LossTerms {
  double reid = 0.0;
  double skd = 0.0;
};

/// L_ReID + alpha L_SKD + beta (L*_ReID + alpha L*_SKD). Without rehearsed
/// terms only the real-stream terms contribute.
double total_loss(const LossTerms& real, const std::optional<LossTerms>& rehearsed, double alpha,
                  double beta);

/// Extractor parameters <- lambda * old + (1 - lambda) * new. Classifiers untouched.
void ema_fuse(const ReidModel& old_model, ReidModel& new_model, double lambda);

}  // namespace dask

#include "doctest.h"

#include <Eigen/Geometry>

#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace dask;
using namespace dask::testing;

namespace {

RowMatrix<double> random_matrix(Index r, Index c, Rng& rng) {
  RowMatrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1.0, 1.0);
  return m;
}

// Random labels in which every identity occurs at least twice and at least two identities exist.
std::vector<int> random_pk_labels(Rng& rng, int ids) {
  std::vector<int> y;
  for (int i = 0; i < ids; ++i) {
    const int k = 2 + static_cast<int>(rng() % 3);
    y.insert(y.end(), static_cast<std::size_t>(k), i);
  }
  std::shuffle(y.begin(), y.end(), rng);
  return y;
}

double kl_oracle(const Rows& s_old, const Rows& s_new, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < s_old.size(); ++i) {
    double zo = 0.0, zn = 0.0;
    for (std::size_t j = 0; j < s_old[i].size(); ++j) {
      zo += std::exp(s_old[i][j] / tau);
      zn += std::exp(s_new[i][j] / tau);
    }
    for (std::size_t j = 0; j < s_old[i].size(); ++j) {
      const double p = std::exp(s_old[i][j] / tau) / zo, q = std::exp(s_new[i][j] / tau) / zn;
      total += p * std::log(p / q);
    }
  }
  return total / static_cast<double>(s_old.size());
}

double ce_oracle(const Rows& logits, const std::vector<int>& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v);
    total += std::log(z) - logits[i][static_cast<std::size_t>(y[i])];
  }
  return total / static_cast<double>(logits.size());
}

double max_param_diff(const std::vector<Var>& a, const std::vector<Var>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, (a[i].value().data - b[i].value().data).abs().maxCoeff());
  }
  return worst;
}

}  // namespace

TEST_SUITE("reid") {
  TEST_CASE("architecture") {
    Rng rng(1);
    const ReidModel m = make_reid_model(ReidArchitecture{}, 10, rng);
    REQUIRE(m.extractor.size() == 4);
    const Index widths[] = {3, 16, 32, 64, 64};
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(m.extractor[i].weight.shape() == Shape{widths[i + 1], widths[i], 3, 3});
      CHECK(m.extractor[i].stride == 2);
    }
    CHECK(m.embedding_dim() == 64);
    CHECK(m.num_classes() == 10);
    Tape tape(Tape::Mode::inference);
    const Var f = m.features(tape, constant(Tensor({2, 3, 64, 32})));
    CHECK(f.shape() == Shape{2, 64});
    CHECK(m.logits(tape, f).shape() == Shape{2, 10});
  }

  TEST_CASE("similarity matrix matches the cosine oracle") {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
      FeatureBatch fb{random_matrix(2 + static_cast<Index>(rng() % 8), 1 + static_cast<Index>(rng() % 6), rng), {}};
      const RowMatrix<double> s = similarity_matrix(fb);
      const Rows want = cosine_oracle(to_rows(fb.features));
      double worst = 0.0;
      for (Index i = 0; i < s.rows(); ++i)
        for (Index j = 0; j < s.cols(); ++j) worst = std::max(worst, std::abs(s(i, j) - want[i][j]));
      CHECK(worst < 1e-12);
    }
  }

  TEST_CASE("triplet loss matches the brute-force oracle") {
    Rng rng(3);
    for (int t = 0; t < 60; ++t) {
      const std::vector<int> y = random_pk_labels(rng, 2 + static_cast<int>(rng() % 4));
      FeatureBatch fb{random_matrix(static_cast<Index>(y.size()), 1 + static_cast<Index>(rng() % 5), rng), y};
      const double margin = uniform(rng, 0.0, 1.0);
      CHECK(std::abs(triplet_loss(fb, margin) - triplet_oracle(to_rows(fb.features), y, margin)) < 1e-12);
    }
  }

  TEST_CASE("anchors without a positive are skipped") {
    FeatureBatch fb{RowMatrix<double>(4, 1), {0, 0, 1, 2}};
    fb.features << 0.0, 1.0, 5.0, 9.0;
    // Only anchors 0 and 1 qualify: hardest positive 1, nearest negatives 5 and 4.
    CHECK(triplet_loss(fb, 0.5) == doctest::Approx(0.0));
    CHECK(triplet_loss(fb, 5.0) == doctest::Approx(((1 - 5 + 5.0) + (1 - 4 + 5.0)) / 2.0));
    FeatureBatch lonely{RowMatrix<double>(2, 1), {0, 1}};
    lonely.features << 0.0, 1.0;
    CHECK_THROWS_AS(triplet_loss(lonely, 0.3), ValueError);
  }

  TEST_CASE("triplet loss is invariant to rigid motions of the feature space") {
    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
      const std::vector<int> y = random_pk_labels(rng, 3);
      FeatureBatch fb{random_matrix(static_cast<Index>(y.size()), 4, rng), y};
      Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::Random(4, 4)).householderQ();
      const Eigen::RowVectorXd shift = Eigen::RowVectorXd::Random(4) * 5.0;
      FeatureBatch moved{(fb.features * q).rowwise() + shift, y};
      CHECK(std::abs(triplet_loss(fb, 0.3) - triplet_loss(moved, 0.3)) < 1e-9);
    }
  }

  TEST_CASE("similarity distillation") {
    Rng rng(5);
    for (int t = 0; t < 30; ++t) {
      const Index n = 2 + static_cast<Index>(rng() % 6);
      const RowMatrix<double> a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
      const double tau = uniform(rng, 0.2, 2.0);
      CHECK(std::abs(skd_loss(a, b, tau) - kl_oracle(to_rows(a), to_rows(b), tau)) < 1e-12);
      CHECK(skd_loss(a, b, tau) >= 0.0);
      CHECK(std::abs(skd_loss(a, a, tau)) < 1e-14);
    }
    const RowMatrix<double> a = random_matrix(3, 3, rng);
    CHECK_THROWS_AS(skd_loss(a, random_matrix(3, 4, rng), 1.0), ShapeError);
    CHECK_THROWS_AS(skd_loss(a, a, 0.0), ValueError);
  }

  TEST_CASE("distillation gradient does not reach the teacher") {
    Rng rng(6);
    const Var teacher = parameter(Tensor({4, 3}, Eigen::ArrayXd::Random(12)));
    const Var student = parameter(Tensor({4, 3}, Eigen::ArrayXd::Random(12)));
    Tape tape;
    const RowMatrix<double> s_old = similarity_matrix(tape, teacher).value().matrix();
    tape.backward(skd_loss(tape, s_old, similarity_matrix(tape, student), 1.0));
    CHECK_FALSE(teacher.has_grad());
    CHECK(student.has_grad());
  }

  TEST_CASE("re-identification loss is triplet plus cross-entropy") {
    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
      const std::vector<int> y = random_pk_labels(rng, 3);
      FeatureBatch fb{random_matrix(static_cast<Index>(y.size()), 5, rng), y};
      const RowMatrix<double> logits = random_matrix(static_cast<Index>(y.size()), 3, rng);
      const double want = triplet_oracle(to_rows(fb.features), y, 0.3) + ce_oracle(to_rows(logits), y);
      CHECK(std::abs(reid_loss(fb, logits, 0.3) - want) < 1e-12);
    }
  }

  TEST_CASE("total loss weighting") {
    const LossTerms real{1.0, 2.0}, reh{3.0, 4.0};
    CHECK(total_loss(real, std::nullopt, 1.0, 4.5) == 3.0);
    CHECK(total_loss(real, reh, 1.0, 4.5) == doctest::Approx(3.0 + 4.5 * 7.0));
    CHECK(total_loss(real, reh, 0.0, 0.0) == 1.0);
    CHECK(total_loss(real, reh, 0.5, 2.0) == doctest::Approx(2.0 + 2.0 * 5.0));
  }

  TEST_CASE("EMA fusion blends extractor parameters only") {
    Rng rng(8);
    const ReidModel old_m = make_reid_model(ReidArchitecture{}, 5, rng);
    const ReidModel base = make_reid_model(ReidArchitecture{}, 7, rng);
    for (double lambda : {0.0, 0.5, 1.0, 0.3}) {
      ReidModel m = clone(base);
      ema_fuse(old_m, m, lambda);
      const auto po = old_m.extractor_parameters(), pb = base.extractor_parameters(), pm = m.extractor_parameters();
      double worst = 0.0;
      for (std::size_t i = 0; i < pm.size(); ++i) {
        const Eigen::ArrayXd want = lambda * po[i].value().data + (1.0 - lambda) * pb[i].value().data;
        worst = std::max(worst, (pm[i].value().data - want).abs().maxCoeff());
      }
      CHECK(worst < 1e-15);
      CHECK((m.classifier.weight.value().data - base.classifier.weight.value().data).abs().maxCoeff() == 0.0);
    }
    ReidModel m = clone(base);
    CHECK_THROWS_AS(ema_fuse(old_m, m, 1.5), ValueError);
    ReidArchitecture narrow;
    narrow.channels = {3, 8, 8};
    ReidModel other = make_reid_model(narrow, 5, rng);
    CHECK_THROWS_AS(ema_fuse(old_m, other, 0.5), ShapeError);
  }

  TEST_CASE("clones are independent and classifier reset keeps the extractor") {
    Rng rng(9);
    const ReidModel m = make_reid_model(ReidArchitecture{}, 5, rng);
    ReidModel c = clone(m);
    CHECK(max_param_diff(c.parameters(), m.parameters()) == 0.0);
    c.extractor[0].weight.mutable_value().data(0) += 1.0;
    CHECK(m.extractor[0].weight.value().data(0) != c.extractor[0].weight.value().data(0));
    ReidModel r = clone(m);
    reset_classifier(r, 9, rng);
    CHECK(r.num_classes() == 9);
    CHECK(max_param_diff(r.extractor_parameters(), m.extractor_parameters()) == 0.0);
  }

  TEST_CASE("feature extraction clips inputs and is chunk-independent") {
    Rng rng(10);
    const ReidModel m = make_reid_model(ReidArchitecture{}, 5, rng);
    std::vector<Image> imgs;
    std::vector<int> y;
    for (int i = 0; i < 5; ++i) {
      Image img(32, 16);
      for (Index j = 0; j < img.pixels.size(); ++j) img.pixels(j) = uniform(rng, -0.5, 1.5);
      imgs.push_back(img);
      y.push_back(i);
    }
    const FeatureBatch a = extract_features(m, imgs, y, 64);
    const FeatureBatch b = extract_features(m, imgs, y, 2);
    CHECK((a.features - b.features).cwiseAbs().maxCoeff() < 1e-12);
    std::vector<Image> clipped;
    for (const Image& img : imgs) clipped.push_back(clip01(img));
    CHECK((extract_features(m, clipped, y).features - a.features).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(extract_features(m, std::span<const Image>{}, std::span<const int>{}), ValueError);
  }
}

TEST_SUITE("reid") {
  TEST_CASE("worked examples") {
    SUBCASE("feature extraction shapes, purity and permutation") {
      Rng rng(31);
      const ReidModel m = make_reid_model(ReidArchitecture{}, 4, rng);
      std::vector<Image> imgs;
      for (int i = 0; i < 3; ++i) {
        Image img(32, 16);
        for (Index j = 0; j < img.pixels.size(); ++j) img.pixels(j) = uniform(rng, 0.0, 1.0);
        imgs.push_back(img);
      }
      const FeatureBatch one = extract_features(m, std::vector<Image>{imgs[0]}, std::vector<int>{0});
      CHECK(one.features.rows() == 1);
      CHECK(one.features.cols() == 64);
      const FeatureBatch dup =
          extract_features(m, std::vector<Image>{imgs[1], imgs[1]}, std::vector<int>{1, 1});
      CHECK((dup.features.row(0) - dup.features.row(1)).cwiseAbs().maxCoeff() == 0.0);
      const FeatureBatch fwd = extract_features(m, imgs, std::vector<int>{0, 1, 2});
      const FeatureBatch rev =
          extract_features(m, std::vector<Image>{imgs[2], imgs[0], imgs[1]}, std::vector<int>{2, 0, 1});
      CHECK((fwd.features.row(2) - rev.features.row(0)).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((fwd.features.row(0) - rev.features.row(1)).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((fwd.features.row(1) - rev.features.row(2)).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("similarity of orthonormal and parallel rows") {
      FeatureBatch ortho{RowMatrix<double>(2, 2), {}};
      ortho.features << 1, 0, 0, 1;
      CHECK(similarity_matrix(ortho).isApprox(RowMatrix<double>::Identity(2, 2)));
      FeatureBatch par{RowMatrix<double>(2, 3), {}};
      par.features << 0.3, -1, 2, 0.3, -1, 2;
      CHECK((similarity_matrix(par).array() - 1.0).abs().maxCoeff() < 1e-15);
    }
    SUBCASE("distillation by hand") {
      RowMatrix<double> s_old(2, 2), s_new(2, 2);
      s_old << 1, 0, 0, 1;
      s_new << 1, 1, 1, 1;
      const double p = std::exp(1.0) / (std::exp(1.0) + 1.0);
      const double row = p * std::log(p / 0.5) + (1 - p) * std::log((1 - p) / 0.5);
      CHECK(skd_loss(s_old, s_new, 1.0) == doctest::Approx(row).epsilon(1e-14));
      CHECK(skd_loss(s_old, s_new, 1.0) == doctest::Approx(0.1109).epsilon(1e-3));
    }
    SUBCASE("batch-hard triplet by hand") {
      FeatureBatch fb{RowMatrix<double>(3, 2), {0, 0, 1}};
      fb.features << 0, 0, 0, 0.1, 1, 0;
      CHECK(triplet_loss(fb, 0.3) == 0.0);
      FeatureBatch same{RowMatrix<double>(4, 2), {0, 0, 1, 1}};
      same.features.setConstant(0.7);
      CHECK(triplet_loss(same, 0.3) == doctest::Approx(0.3).epsilon(1e-15));
    }
    SUBCASE("re-identification loss limits") {
      FeatureBatch fb{RowMatrix<double>(4, 2), {0, 0, 1, 1}};
      fb.features << 0, 0, 0, 0, 10, 0, 10, 0;
      RowMatrix<double> saturated(4, 2);
      saturated << 60, 0, 60, 0, 0, 60, 0, 60;
      CHECK(reid_loss(fb, saturated, 0.3) < 1e-20);
      const RowMatrix<double> uniform_logits = RowMatrix<double>::Constant(4, 5, 0.25);
      CHECK(reid_loss(fb, uniform_logits, 0.3) == doctest::Approx(std::log(5.0)).epsilon(1e-15));
    }
    SUBCASE("total loss by hand") {
      CHECK(total_loss({1.0, 0.2}, LossTerms{0.8, 0.1}, 1.0, 4.5) == doctest::Approx(5.25).epsilon(1e-15));
      CHECK(total_loss({1.0, 0.2}, LossTerms{0.8, 0.1}, 0.0, 0.0) == 1.0);
    }
  }
}

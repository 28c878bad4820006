#include <doctest.h>

#include <cmath>
#include <vector>

#include "maple/fusion_head.hpp"
#include "maple/hierarchy.hpp"

using namespace maple;

namespace {

Mat<double> randm(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  }
  return m;
}

// Per-row losses computed with plain scalar loops, no autograd involved.
double naive_level_loss(const Mat<double>& logits, const Mat<double>& y) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double positives = y.row(i).sum();
    if (positives == 1.0) {
      Eigen::Index hot = 0;
      for (Eigen::Index j = 0; j < y.cols(); ++j) {
        if (y(i, j) == 1.0) hot = j;
      }
      double mx = logits.row(i).maxCoeff();
      double lse = 0.0;
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        lse += std::exp(logits(i, j) - mx);
      }
      total += mx + std::log(lse) - logits(i, hot);
    } else {
      double row = 0.0;
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        double x = logits(i, j);
        row += std::max(x, 0.0) - x * y(i, j) + std::log1p(std::exp(-std::abs(x)));
      }
      total += row / static_cast<double>(logits.cols());
    }
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

TEST_CASE("gate shape, range, and the zero-parameter identity") {
  Rng rng(3);
  GateNet<double> g = GateNet<double>::init(6, rng);
  Tensor<double> z = Tensor<double>::constant({2, 6}, randm(2, 6, rng));
  Tensor<double> e = Tensor<double>::constant({2, 4, 6}, randm(8, 6, rng));

  Tensor<double> gamma = gate(z, e, g);
  CHECK(gamma.shape() == Shape{2, 4, 6});
  CHECK(gamma.value().minCoeff() > 0.0);
  CHECK(gamma.value().maxCoeff() < 1.0);

  SUBCASE("zero weights give the indifferent gate 0.5") {
    g.w.raw_value().setZero();
    g.b.raw_value().setZero();
    g.norm_bias.raw_value().setZero();
    Tensor<double> flat = gate(z, e, g);
    CHECK((flat.value().array() - 0.5).abs().maxCoeff() == 0.0);
  }
  SUBCASE("distinct nodes get distinct gates") {
    CHECK(gamma.value().row(0) != gamma.value().row(1));
  }
  SUBCASE("shape mismatch") {
    Tensor<double> zb = Tensor<double>::constant({2, 5}, randm(2, 5, rng));
    CHECK_THROWS_AS(gate(zb, e, g), ShapeError);
  }
}

TEST_CASE("fusion boundaries and convexity") {
  Rng rng(17);
  Tensor<double> z = Tensor<double>::constant({3, 5}, randm(3, 5, rng));
  Tensor<double> e = Tensor<double>::constant({3, 2, 5}, randm(6, 5, rng));

  SUBCASE("gamma = 1 keeps the embeddings") {
    Tensor<double> ones =
        Tensor<double>::constant({3, 2, 5}, Mat<double>::Ones(6, 5));
    CHECK(fuse(z, e, ones).value() == e.value());
  }
  SUBCASE("gamma = 0 keeps the replicated visual context") {
    Tensor<double> zeros =
        Tensor<double>::constant({3, 2, 5}, Mat<double>::Zero(6, 5));
    Mat<double> out = fuse(z, e, zeros).value();
    for (Eigen::Index b = 0; b < 3; ++b) {
      for (Eigen::Index v = 0; v < 2; ++v) {
        CHECK(out.row(b * 2 + v) == z.value().row(b));
      }
    }
  }
  SUBCASE("interior gates interpolate coordinatewise") {
    Mat<double> gm = randm(6, 5, rng);
    gm = (1.0 / (1.0 + (-gm.array()).exp())).matrix();  // squash into (0,1)
    Tensor<double> gamma = Tensor<double>::constant({3, 2, 5}, gm);
    Mat<double> out = fuse(z, e, gamma).value();
    for (Eigen::Index b = 0; b < 3; ++b) {
      for (Eigen::Index v = 0; v < 2; ++v) {
        for (Eigen::Index j = 0; j < 5; ++j) {
          double ev = e.value()(b * 2 + v, j);
          double zv = z.value()(b, j);
          double x = out(b * 2 + v, j);
          CHECK(x >= std::min(ev, zv) - 1e-15);
          CHECK(x <= std::max(ev, zv) + 1e-15);
        }
      }
    }
  }
  SUBCASE("gate shape must match embeddings") {
    Tensor<double> bad =
        Tensor<double>::constant({3, 3, 5}, Mat<double>::Ones(9, 5));
    CHECK_THROWS_AS(fuse(z, e, bad), ShapeError);
  }
}

TEST_CASE("prediction head") {
  Rng rng(23);
  Eigen::Index d = 6, v = 35, b = 3;
  Head<double> head = Head<double>::init(d, v, rng);
  Tensor<double> z = Tensor<double>::constant({b, d}, randm(b, d, rng));
  Tensor<double> fused =
      Tensor<double>::constant({b, 4, d}, randm(b * 4, d, rng));

  SUBCASE("shape contract") {
    CHECK(predict(fused, z, head).shape() == Shape{b, v});
  }
  SUBCASE("zero weights leave only the bias") {
    head.w.raw_value().setZero();
    head.b.raw_value() = randm(1, v, rng);
    Mat<double> logits = predict(fused, z, head).value();
    for (Eigen::Index i = 0; i < b; ++i) {
      CHECK(logits.row(i) == head.b.value().row(0));
    }
  }
  SUBCASE("matches the per-image loop oracle") {
    Mat<double> logits = predict(fused, z, head).value();
    for (Eigen::Index i = 0; i < b; ++i) {
      Mat<double> pooled = Mat<double>::Zero(1, d);
      for (Eigen::Index t = 0; t < 4; ++t) pooled += fused.value().row(i * 4 + t);
      pooled /= 4.0;
      Mat<double> cat(1, 2 * d);
      cat << pooled, z.value().row(i);
      Mat<double> want = cat * head.w.value() + head.b.value();
      CHECK((logits.row(i) - want.row(0)).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("adaptive loss closed forms") {
  auto level_loss_value = [](const Mat<double>& lg, const Mat<double>& y) {
    Tensor<double> logits = Tensor<double>::param(
        {lg.rows(), lg.cols()}, lg, "lg");
    return adaptive_level_loss(logits, y).scalar();
  };

  SUBCASE("single positive routes to cross-entropy") {
    Mat<double> y(1, 3);
    y << 0, 1, 0;
    CHECK(level_loss_value(Mat<double>::Zero(1, 3), y) ==
          doctest::Approx(std::log(3.0)).epsilon(1e-9));
  }
  SUBCASE("two positives route to binary cross-entropy") {
    Mat<double> y(1, 3);
    y << 1, 1, 0;
    CHECK(level_loss_value(Mat<double>::Zero(1, 3), y) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SUBCASE("all-negative rows also take the BCE branch") {
    CHECK(level_loss_value(Mat<double>::Zero(1, 2), Mat<double>::Zero(1, 2)) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SUBCASE("mixed batch averages both branches") {
    Mat<double> y(2, 3);
    y << 0, 1, 0, 1, 1, 0;
    CHECK(level_loss_value(Mat<double>::Zero(2, 3), y) ==
          doctest::Approx(0.5 * (std::log(3.0) + std::log(2.0)))
              .epsilon(1e-9));
  }
  SUBCASE("extreme logits stay finite") {
    Mat<double> lg(2, 2);
    lg << 500.0, -500.0, -500.0, 500.0;
    Mat<double> y(2, 2);
    y << 1, 0, 1, 1;
    Tensor<double> logits = Tensor<double>::param({2, 2}, lg, "lg");
    Tensor<double> loss = adaptive_level_loss(logits, y);
    CHECK(std::isfinite(loss.scalar()));
    loss.backward();
    CHECK(logits.grad().allFinite());
  }
  SUBCASE("fractional targets are rejected") {
    Mat<double> y(1, 2);
    y << 0.5, 0.5;
    Tensor<double> logits =
        Tensor<double>::param({1, 2}, Mat<double>::Zero(1, 2), "lg");
    CHECK_THROWS_AS(adaptive_level_loss(logits, y), ValueError);
  }
  SUBCASE("geometry mismatch") {
    Tensor<double> logits =
        Tensor<double>::param({1, 3}, Mat<double>::Zero(1, 3), "lg");
    Mat<double> narrow = Mat<double>::Zero(1, 2);
    CHECK_THROWS_AS(adaptive_level_loss(logits, narrow), ShapeError);
  }
}

TEST_CASE("total loss decomposes by level") {
  LabelHierarchy h = LabelHierarchy::from_yaml_file("fixtures/aid.yaml");
  std::vector<std::vector<int>> partition;
  for (int t = 1; t <= h.num_levels(); ++t) partition.push_back(h.level_ids(t));
  Rng rng(31);
  Eigen::Index b = 3, v = h.size();
  Mat<double> lg = randm(b, v, rng);

  // one clean path, one two-leaf union, one empty row
  Mat<double> y = Mat<double>::Zero(b, v);
  auto set_path = [&](Eigen::Index row, const std::string& leaf) {
    int id = h.id_of(leaf);
    y(row, id) = 1.0;
    for (int anc : h.ancestors(id)) y(row, anc) = 1.0;
  };
  set_path(0, "buildings");
  set_path(1, "mobile-home");
  set_path(1, "ship");
  // row 2 stays all-zero

  Tensor<double> logits = Tensor<double>::param({b, v}, lg, "lg");
  double got = total_loss(logits, y, partition).scalar();

  SUBCASE("hand-rolled oracle agrees") {
    double want = 0.0;
    for (const auto& ids : partition) {
      Mat<double> ls(b, static_cast<Eigen::Index>(ids.size()));
      Mat<double> ys(b, static_cast<Eigen::Index>(ids.size()));
      for (size_t j = 0; j < ids.size(); ++j) {
        ls.col(static_cast<Eigen::Index>(j)) = lg.col(ids[j]);
        ys.col(static_cast<Eigen::Index>(j)) = y.col(ids[j]);
      }
      want += naive_level_loss(ls, ys);
    }
    want /= static_cast<double>(partition.size());
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
  }
  SUBCASE("joint computation equals the mean of independent level losses") {
    double acc = 0.0;
    for (const auto& ids : partition) {
      std::vector<Eigen::Index> cols(ids.begin(), ids.end());
      Mat<double> ys(b, static_cast<Eigen::Index>(cols.size()));
      for (size_t j = 0; j < cols.size(); ++j) {
        ys.col(static_cast<Eigen::Index>(j)) = y.col(cols[j]);
      }
      acc += adaptive_level_loss(gather_cols(logits, cols), ys).scalar();
    }
    CHECK(got == doctest::Approx(acc / partition.size()).epsilon(1e-12));
  }
  SUBCASE("single level is just that level's loss") {
    LabelHierarchy flat = LabelHierarchy::from_yaml(R"(
levels: 1
nodes:
  - {name: a, level: 1}
  - {name: b, level: 1}
)");
    Mat<double> lg1 = randm(2, 2, rng);
    Mat<double> y1(2, 2);
    y1 << 1, 0, 1, 1;
    Tensor<double> t1 = Tensor<double>::param({2, 2}, lg1, "lg1");
    CHECK(total_loss(t1, y1, {flat.level_ids(1)}).scalar() ==
          adaptive_level_loss(Tensor<double>::param({2, 2}, lg1, "x"), y1)
              .scalar());
  }
  SUBCASE("empty partition is rejected") {
    CHECK_THROWS_AS(total_loss(logits, y, {}), ValueError);
  }
}

TEST_CASE("free logits fit one batch to near-zero loss") {
  LabelHierarchy h = LabelHierarchy::from_yaml(R"(
levels: 2
nodes:
  - {name: A, level: 1}
  - {name: B, level: 1}
  - {name: a1, level: 2, parents: [A]}
  - {name: a2, level: 2, parents: [A]}
  - {name: b1, level: 2, parents: [B]}
)");
  Mat<double> y(2, 5);
  // rows: single-label at level 1 (CE) and multi-label at level 2 (BCE)
  y.row(0) << 1, 0, 1, 1, 0;
  y.row(1) << 0, 1, 0, 0, 1;
  Tensor<double> logits =
      Tensor<double>::param({2, 5}, Mat<double>::Zero(2, 5), "lg");

  std::vector<std::vector<int>> partition = {h.level_ids(1), h.level_ids(2)};
  double loss = 0.0;
  for (int step = 0; step < 2500; ++step) {
    Tensor<double> l = total_loss(logits, y, partition);
    loss = l.scalar();
    l.backward();
    logits.raw_value() -= 5.0 * logits.grad();
    logits.zero_grad();
  }
  CHECK(loss < 1e-3);
}

TEST_CASE("gradients reach gate, head, and both inputs") {
  Rng rng(41);
  Eigen::Index d = 5, m = 4, b = 2;
  GateNet<double> g = GateNet<double>::init(d, rng);
  Head<double> head = Head<double>::init(d, m, rng);
  Tensor<double> z = Tensor<double>::param({b, d}, randm(b, d, rng), "z");
  Tensor<double> e = Tensor<double>::param({b, m, d}, randm(b * m, d, rng), "e");
  Mat<double> y(b, m);
  y << 1, 0, 1, 0, 0, 1, 0, 1;
  std::vector<std::vector<int>> partition = {{0, 1}, {2, 3}};

  auto f = [&]() {
    Tensor<double> gamma = gate(z, e, g);
    Tensor<double> fused = fuse(z, e, gamma);
    return total_loss(predict(fused, z, head), y, partition);
  };
  f().backward();
  for (Tensor<double>* t :
       {&g.w, &g.b, &g.norm_gain, &g.norm_bias, &head.w, &head.b, &z, &e}) {
    CHECK(t->grad().cwiseAbs().maxCoeff() > 0.0);
  }
  CHECK(grad_check<double>(f, {g.w, head.w, z, e}, 1e-5) < 1e-4);
}

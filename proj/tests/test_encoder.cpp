#include <doctest.h>

#include <cmath>
#include <vector>

#include "maple/encoder.hpp"

using namespace maple;

namespace {

// Images with coded pixels: value(c, y, x) = c*10000 + y*100 + x, offset per
// batch element so rows are distinguishable.
Tensor<double> coded_images(Eigen::Index b, const EncoderConfig& cfg) {
  Eigen::Index c = cfg.channels, s = cfg.image_size;
  Mat<double> im(b * c * s, s);
  for (Eigen::Index bi = 0; bi < b; ++bi) {
    for (Eigen::Index ch = 0; ch < c; ++ch) {
      for (Eigen::Index y = 0; y < s; ++y) {
        for (Eigen::Index x = 0; x < s; ++x) {
          im(bi * c * s + ch * s + y, x) =
              static_cast<double>(bi) * 1e6 + ch * 10000 + y * 100 + x;
        }
      }
    }
  }
  return Tensor<double>::constant({b, c, s, s}, std::move(im));
}

Tensor<double> noise_images(Eigen::Index b, const EncoderConfig& cfg,
                            Rng& rng) {
  Eigen::Index c = cfg.channels, s = cfg.image_size;
  Mat<double> im(b * c * s, s);
  for (Eigen::Index i = 0; i < im.rows(); ++i) {
    for (Eigen::Index j = 0; j < im.cols(); ++j) im(i, j) = rng.normal();
  }
  return Tensor<double>::constant({b, c, s, s}, std::move(im));
}

Mat<double> randm(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  }
  return m;
}

// Deterministic scalar readout so gradients reach every coordinate.
Tensor<double> weigh(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::Index rows = y.value().rows(), cols = y.value().cols();
  Tensor<double> w = Tensor<double>::constant(
      y.shape(), randm(rows, cols, rng));
  return sum(mul(y, w));
}

std::vector<std::pair<std::string, Tensor<double>*>> encoder_params(
    VisualEncoder<double>& e) {
  std::vector<std::pair<std::string, Tensor<double>*>> out = {
      {"patch_proj", &e.patch_proj},
      {"patch_bias", &e.patch_bias},
      {"patch_pos", &e.patch_pos},
      {"global_token", &e.global_token},
      {"visual_w", &e.visual_w},
      {"visual_b", &e.visual_b},
  };
  for (size_t i = 0; i < e.blocks.size(); ++i) {
    auto& b = e.blocks[i];
    std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "ln1_gain", &b.ln1_gain});
    out.push_back({p + "ln1_bias", &b.ln1_bias});
    out.push_back({p + "w_qkv", &b.w_qkv});
    out.push_back({p + "b_qkv", &b.b_qkv});
    out.push_back({p + "w_out", &b.w_out});
    out.push_back({p + "b_out", &b.b_out});
    out.push_back({p + "ln2_gain", &b.ln2_gain});
    out.push_back({p + "ln2_bias", &b.ln2_bias});
    out.push_back({p + "w_fc1", &b.w_fc1});
    out.push_back({p + "b_fc1", &b.b_fc1});
    out.push_back({p + "w_fc2", &b.w_fc2});
    out.push_back({p + "b_fc2", &b.b_fc2});
  }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig cfg;
  cfg.validate();  // defaults are fine
  SUBCASE("patch must divide image size") {
    cfg.patch = 5;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
  }
  SUBCASE("heads must divide width") {
    cfg.heads = 5;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
  }
  SUBCASE("token counts") {
    cfg.image_size = 16;
    cfg.patch = 16;
    CHECK(cfg.num_patches() == 1);
    cfg.image_size = 32;
    cfg.patch = 8;
    CHECK(cfg.num_patches() == 16);
  }
}

TEST_CASE("patchify lays patches out channel-major and row-major") {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 2;
  cfg.patch = 4;
  cfg.dim = 32;  // equal to patch_dim so the projection can be identity
  cfg.heads = 4;
  cfg.depth = 0;
  REQUIRE(cfg.patch_dim() == cfg.dim);
  Rng rng(7);
  auto enc = VisualEncoder<double>::init(cfg, rng);
  enc.patch_proj.raw_value() = Mat<double>::Identity(32, 32);
  enc.patch_bias.raw_value().setZero();
  enc.patch_pos.raw_value().setZero();

  Tensor<double> images = coded_images(2, cfg);
  Tensor<double> tok = patchify(images, enc);
  REQUIRE(tok.shape() == Shape{2, 4, 32});
  const Mat<double>& t = tok.value();  // (2*4, 32)
  Eigen::Index p = 4, side = 2;
  for (Eigen::Index bi = 0; bi < 2; ++bi) {
    for (Eigen::Index py = 0; py < side; ++py) {
      for (Eigen::Index px = 0; px < side; ++px) {
        for (Eigen::Index ch = 0; ch < 2; ++ch) {
          for (Eigen::Index dy = 0; dy < p; ++dy) {
            for (Eigen::Index dx = 0; dx < p; ++dx) {
              double expect = bi * 1e6 + ch * 10000 + (py * p + dy) * 100 +
                              (px * p + dx);
              CHECK(t(bi * 4 + py * side + px, (ch * p + dy) * p + dx) ==
                    expect);
            }
          }
        }
      }
    }
  }

  SUBCASE("wrong geometry is rejected") {
    Tensor<double> bad = Tensor<double>::constant(
        {1, 2, 4, 4}, Mat<double>::Zero(8, 4));
    CHECK_THROWS_AS(patchify(bad, enc), ShapeError);
  }
  SUBCASE("images must be constants") {
    Tensor<double> learned = Tensor<double>::param(
        {1, 2, 8, 8}, Mat<double>::Zero(16, 8), "img");
    CHECK_THROWS_AS(patchify(learned, enc), ValueError);
  }
}

TEST_CASE("positional embeddings distinguish patch arrangements") {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch = 4;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.depth = 1;
  Rng rng(11);
  auto enc = VisualEncoder<double>::init(cfg, rng);

  // b swaps the top-left and bottom-right patches of a
  Eigen::Index s = 8, p = 4;
  Mat<double> a = randm(s, s, rng);
  Mat<double> b = a;
  b.block(0, 0, p, p) = a.block(p, p, p, p);
  b.block(p, p, p, p) = a.block(0, 0, p, p);
  Tensor<double> ia = Tensor<double>::constant({1, 1, s, s}, std::move(a));
  Tensor<double> ib = Tensor<double>::constant({1, 1, s, s}, std::move(b));

  Tensor<double> none;  // global-only encoder
  auto oa = encode(ia, none, enc);
  auto ob = encode(ib, none, enc);
  double diff = (oa.global.value() - ob.global.value()).cwiseAbs().maxCoeff();
  CHECK(diff > 1e-6);

  // sanity: the swap alone is why they differ
  auto oa2 = encode(ia, none, enc);
  CHECK(oa.global.value() == oa2.global.value());
}

TEST_CASE("encode shape contract and batch independence") {
  EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.channels = 3;
  cfg.patch = 8;
  cfg.dim = 24;
  cfg.heads = 3;
  cfg.depth = 1;
  Rng rng(23);
  auto enc = VisualEncoder<double>::init(cfg, rng);
  Tensor<double> ct =
      Tensor<double>::param({3, 24}, randm(3, 24, rng) * 0.1, "ct");

  SUBCASE("output shapes") {
    auto out = encode(noise_images(2, cfg, rng), ct, enc);
    CHECK(out.node_tokens.shape() == Shape{2, 3, 24});
    CHECK(out.global.shape() == Shape{2, 24});
  }
  SUBCASE("identical rows stay identical") {
    Tensor<double> one = noise_images(1, cfg, rng);
    Mat<double> rep(3 * one.value().rows(), one.value().cols());
    rep << one.value(), one.value(), one.value();
    Mat<double> third = randm(one.value().rows(), one.value().cols(), rng);
    rep.bottomRows(one.value().rows()) = third;
    Tensor<double> batch =
        Tensor<double>::constant({3, 3, 16, 16}, std::move(rep));
    auto out = encode(batch, ct, enc);
    CHECK(out.global.value().row(0) == out.global.value().row(1));
    CHECK(out.global.value().row(0) != out.global.value().row(2));
    CHECK(out.node_tokens.value().middleRows(0, 3) ==
          out.node_tokens.value().middleRows(3, 3));
  }
  SUBCASE("class token width mismatch") {
    Tensor<double> bad =
        Tensor<double>::param({3, 23}, randm(3, 23, rng), "bad");
    CHECK_THROWS_AS(encode(noise_images(1, cfg, rng), bad, enc), ShapeError);
  }
}

TEST_CASE("zero depth is an identity path for class tokens") {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch = 4;
  cfg.dim = 12;
  cfg.heads = 2;
  cfg.depth = 0;
  Rng rng(31);
  auto enc = VisualEncoder<double>::init(cfg, rng);
  enc.visual_w.raw_value() = Mat<double>::Identity(12, 12);
  enc.visual_b.raw_value().setZero();

  Mat<double> ctm = randm(4, 12, rng);
  Tensor<double> ct = Tensor<double>::param({4, 12}, ctm, "ct");
  auto out = encode(noise_images(3, cfg, rng), ct, enc);
  for (Eigen::Index b = 0; b < 3; ++b) {
    CHECK(out.node_tokens.value().middleRows(b * 4, 4) == ctm);
    CHECK(out.global.value().row(b) == enc.global_token.value().row(0));
  }
}

TEST_CASE("class token permutation equivariance") {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 2;
  cfg.patch = 4;
  cfg.dim = 16;
  cfg.heads = 4;
  cfg.depth = 2;
  Rng rng(43);
  auto enc = VisualEncoder<double>::init(cfg, rng);
  Tensor<double> images = noise_images(2, cfg, rng);

  Mat<double> ctm = randm(5, 16, rng);
  std::vector<Eigen::Index> perm = {3, 0, 4, 1, 2};
  Mat<double> ctp(5, 16);
  for (Eigen::Index i = 0; i < 5; ++i) ctp.row(i) = ctm.row(perm[i]);

  auto orig = encode(images, Tensor<double>::constant({5, 16}, ctm), enc);
  auto shuf = encode(images, Tensor<double>::constant({5, 16}, ctp), enc);
  for (Eigen::Index b = 0; b < 2; ++b) {
    for (Eigen::Index i = 0; i < 5; ++i) {
      double row_diff = (shuf.node_tokens.value().row(b * 5 + i) -
                         orig.node_tokens.value().row(b * 5 + perm[i]))
                            .cwiseAbs()
                            .maxCoeff();
      CHECK(row_diff < 1e-10);
    }
  }
  double gdiff =
      (orig.global.value() - shuf.global.value()).cwiseAbs().maxCoeff();
  CHECK(gdiff < 1e-10);
}

TEST_CASE("gradients reach every encoder parameter") {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.depth = 2;
  cfg.mlp_ratio = 2.0;
  Rng rng(57);
  auto enc = VisualEncoder<double>::init(cfg, rng);
  Tensor<double> images = noise_images(2, cfg, rng);
  Tensor<double> ct =
      Tensor<double>::param({3, 8}, randm(3, 8, rng) * 0.2, "ct");

  auto out = encode(images, ct, enc);
  Tensor<double> loss = add(weigh(out.node_tokens, 1), weigh(out.global, 2));
  loss.backward();
  for (auto& [name, t] : encoder_params(enc)) {
    INFO("parameter ", name);
    CHECK(t->grad().cwiseAbs().maxCoeff() > 0.0);
  }
  CHECK(ct.grad().cwiseAbs().maxCoeff() > 0.0);

  SUBCASE("analytic gradients match finite differences") {
    auto f = [&]() {
      auto o = encode(images, ct, enc);
      return add(weigh(o.node_tokens, 1), weigh(o.global, 2));
    };
    std::vector<Tensor<double>> subset = {enc.patch_pos, enc.global_token,
                                          enc.blocks[0].w_qkv,
                                          enc.blocks[1].ln2_gain, ct};
    double worst = grad_check<double>(f, subset, 1e-5);
    CHECK(worst < 1e-4);  // headroom over central-difference roundoff
  }
}

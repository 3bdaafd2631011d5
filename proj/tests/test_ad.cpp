#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mdmm/admath.hpp"
#include "mdmm/gaussian.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/tape.hpp"
#include "support/fd.hpp"

using mdmm::DiagGaussian;
using mdmm::Mat;
using mdmm::Rng;
using mdmm::RngKey;
using mdmm::Vec;
using mdmm::ad::Tape;
using mdmm::ad::Var;
using oracle::FdProblem;

namespace {

Mat mat_of(int rows, int cols, std::initializer_list<double> xs) {
  Mat m(rows, cols);
  std::copy(xs.begin(), xs.end(), m.a.begin());
  return m;
}

Mat random_mat(int rows, int cols, RngKey key, double scale = 1.0, double shift = 0.0) {
  Mat m(rows, cols);
  Rng rng(key);
  for (double& v : m.a) v = rng.gaussian() * scale + shift;
  return m;
}

/// Positive-valued random matrix for precision/variance-like operands.
Mat random_pos(int rows, int cols, RngKey key, double lo = 0.3, double hi = 3.0) {
  Mat m(rows, cols);
  Rng rng(key);
  for (double& v : m.a) v = lo + (hi - lo) * rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("tape values match scalar math", "[ad]") {
  Tape t;
  Mat x = mat_of(1, 3, {-0.5, 0.25, 2.0});
  Mat g(1, 3);
  Var v = t.param(x.a.data(), g.a.data(), 1, 3);

  const double* relu = t.value_ptr(t.relu(v));
  CHECK(relu[0] == 0.0);
  CHECK(relu[1] == 0.25);
  CHECK(relu[2] == 2.0);

  const double* sig = t.value_ptr(t.sigmoid(v));
  CHECK(sig[1] == Catch::Approx(1.0 / (1.0 + std::exp(-0.25))).epsilon(1e-15));

  const double* sp = t.value_ptr(t.softplus(v));
  CHECK(sp[0] == Catch::Approx(std::log1p(std::exp(-0.5))).epsilon(1e-15));
  CHECK(sp[2] == Catch::Approx(std::log1p(std::exp(2.0))).epsilon(1e-15));

  CHECK(t.scalar(t.sum_all(v)) == Catch::Approx(1.75).epsilon(1e-15));
  CHECK(t.value_ptr(t.mul_c(v, 3.0))[2] == 6.0);
  CHECK(t.value_ptr(t.add_c(v, 1.0))[0] == 0.5);
}

TEST_CASE("softplus and sigmoid stay finite far from zero", "[ad]") {
  Tape t;
  Mat x = mat_of(1, 4, {-745.0, -40.0, 40.0, 745.0});
  Mat g(1, 4);
  Var v = t.param(x.a.data(), g.a.data(), 1, 4);
  const double* sp = t.value_ptr(t.softplus(v));
  const double* sg = t.value_ptr(t.sigmoid(v));
  for (int i = 0; i < 4; ++i) {
    CHECK(std::isfinite(sp[i]));
    CHECK(std::isfinite(sg[i]));
  }
  CHECK(sp[0] >= 0.0);
  CHECK(sp[3] == Catch::Approx(745.0).epsilon(1e-12));
  CHECK(sg[3] == 1.0);
}

TEST_CASE("unary op gradients match central differences", "[ad]") {
  // Points kept away from the relu kink; everything else is smooth.
  Mat x = mat_of(2, 3, {-1.2, 0.7, 2.3, -0.4, 1.9, -2.6});
  Mat xp = mat_of(2, 3, {0.9, 1.7, 0.31, 2.4, 0.55, 1.1});

  auto wrap = [](auto op) {
    return [op](Tape& t, const std::vector<Var>& vs) { return t.sum_all(op(t, vs[0])); };
  };

  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.relu(v); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.sigmoid(v); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.softplus(v); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.exp_(v); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.neg(v); })}) < 1e-9);
  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.square(v); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.add_c(v, 2.5); })}) < 1e-9);
  CHECK(oracle::fd_max_rel_err({{x}, wrap([](Tape& t, Var v) { return t.mul_c(v, -1.7); })}) < 1e-8);
  CHECK(oracle::fd_max_rel_err({{xp}, wrap([](Tape& t, Var v) { return t.log_(v); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{xp}, wrap([](Tape& t, Var v) { return t.recip(v); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{xp}, wrap([](Tape& t, Var v) { return t.inv_sqrt(v); })}) < 1e-6);
}

TEST_CASE("binary op gradients match central differences", "[ad]") {
  Mat a = random_mat(3, 2, RngKey{11});
  Mat b = random_pos(3, 2, RngKey{12}, 0.5, 2.5);

  auto wrap2 = [](auto op) {
    return [op](Tape& t, const std::vector<Var>& vs) { return t.sum_all(op(t, vs[0], vs[1])); };
  };

  CHECK(oracle::fd_max_rel_err({{a, b}, wrap2([](Tape& t, Var x, Var y) { return t.add(x, y); })}) < 1e-8);
  CHECK(oracle::fd_max_rel_err({{a, b}, wrap2([](Tape& t, Var x, Var y) { return t.sub(x, y); })}) < 1e-8);
  CHECK(oracle::fd_max_rel_err({{a, b}, wrap2([](Tape& t, Var x, Var y) { return t.mul(x, y); })}) < 1e-6);
  CHECK(oracle::fd_max_rel_err({{a, b}, wrap2([](Tape& t, Var x, Var y) { return t.div(x, y); })}) < 1e-6);
}

TEST_CASE("shape op gradients match central differences", "[ad]") {
  Mat row = random_mat(1, 4, RngKey{21});
  Mat block = random_mat(5, 4, RngKey{22});

  // Multiply by a fixed random constant so the reduction gradients are not
  // the all-ones pattern a sum alone would produce.
  Mat cmat = random_mat(6, 4, RngKey{23});
  FdProblem bcast{{row}, [&cmat](Tape& t, const std::vector<Var>& vs) {
                    Var c = t.constant(cmat.a, 6, 4);
                    return t.sum_all(t.mul(t.broadcast_row(vs[0], 6), c));
                  }};
  CHECK(oracle::fd_max_rel_err(bcast) < 1e-6);

  Mat crow = random_mat(1, 4, RngKey{24});
  FdProblem cmean{{block}, [&crow](Tape& t, const std::vector<Var>& vs) {
                    Var c = t.constant(crow.a, 1, 4);
                    return t.sum_all(t.mul(t.col_mean(vs[0]), c));
                  }};
  CHECK(oracle::fd_max_rel_err(cmean) < 1e-6);
}

TEST_CASE("linear gradients match central differences for x, w, b", "[ad]") {
  Mat x = random_mat(4, 3, RngKey{31});
  Mat w = random_mat(2, 3, RngKey{32}, 0.7);
  Mat b = random_mat(1, 2, RngKey{33});
  Mat cmat = random_mat(4, 2, RngKey{34});

  FdProblem p{{x, w, b}, [&cmat](Tape& t, const std::vector<Var>& vs) {
                Var c = t.constant(cmat.a, 4, 2);
                return t.sum_all(t.mul(t.linear(vs[0], vs[1], vs[2]), c));
              }};
  CHECK(oracle::fd_max_rel_err(p) < 1e-6);
}

TEST_CASE("linear value matches hand computation", "[ad]") {
  Tape t;
  Mat x = mat_of(1, 2, {1.0, 2.0});
  Mat w = mat_of(2, 2, {3.0, 4.0, 5.0, 6.0});
  Mat b = mat_of(1, 2, {0.5, -0.5});
  Mat gx(1, 2), gw(2, 2), gb(1, 2);
  Var y = t.linear(t.param(x.a.data(), gx.a.data(), 1, 2),
                   t.param(w.a.data(), gw.a.data(), 2, 2),
                   t.param(b.a.data(), gb.a.data(), 1, 2));
  // y = [3+8+0.5, 5+12-0.5]
  CHECK(t.value_ptr(y)[0] == 11.5);
  CHECK(t.value_ptr(y)[1] == 16.5);
}

TEST_CASE("logpdf value and gradients", "[ad]") {
  Mat mean = mat_of(1, 2, {0.3, -1.1});
  Mat prec = mat_of(1, 2, {2.0, 0.5});
  const Vec target = {0.9, -0.2};

  {
    Tape t;
    Mat gm(1, 2), gp(1, 2);
    Var lp = t.logpdf(t.param(mean.a.data(), gm.a.data(), 1, 2),
                      t.param(prec.a.data(), gp.a.data(), 1, 2), target);
    DiagGaussian g(mean.a, prec.a);
    CHECK(t.scalar(lp) == Catch::Approx(mdmm::log_prob(g, target)).epsilon(1e-14));
  }

  FdProblem p{{mean, prec}, [&target](Tape& t, const std::vector<Var>& vs) {
                return t.logpdf(vs[0], vs[1], target);
              }};
  CHECK(oracle::fd_max_rel_err(p) < 1e-6);
}

TEST_CASE("kl_mean value and gradients over all four operands", "[ad]") {
  Mat ma = random_mat(3, 2, RngKey{41});
  Mat ta = random_pos(3, 2, RngKey{42});
  Mat mb = random_mat(3, 2, RngKey{43});
  Mat tb = random_pos(3, 2, RngKey{44});

  {
    Tape t;
    Mat g1(3, 2), g2(3, 2), g3(3, 2), g4(3, 2);
    Var v = t.kl_mean(t.param(ma.a.data(), g1.a.data(), 3, 2),
                      t.param(ta.a.data(), g2.a.data(), 3, 2),
                      t.param(mb.a.data(), g3.a.data(), 3, 2),
                      t.param(tb.a.data(), g4.a.data(), 3, 2), 1.0 / 3.0);
    double want = 0.0;
    for (int r = 0; r < 3; ++r) {
      DiagGaussian a(ma.row(r), ta.row(r));
      DiagGaussian b(mb.row(r), tb.row(r));
      want += mdmm::kl(a, b);
    }
    want /= 3.0;
    CHECK(t.scalar(v) == Catch::Approx(want).epsilon(1e-13));
  }

  FdProblem p{{ma, ta, mb, tb}, [](Tape& t, const std::vector<Var>& vs) {
                return t.kl_mean(vs[0], vs[1], vs[2], vs[3], 0.25);
              }};
  CHECK(oracle::fd_max_rel_err(p) < 1e-6);
}

TEST_CASE("gradients accumulate across repeated use of one leaf", "[ad]") {
  Tape t;
  Mat x = mat_of(1, 1, {1.5});
  Mat g(1, 1);
  Var v = t.param(x.a.data(), g.a.data(), 1, 1);
  // f = x*x + 3x; f'(1.5) = 2*1.5 + 3 = 6
  Var root = t.sum_all(t.add(t.mul(v, v), t.mul_c(v, 3.0)));
  t.backward(root);
  CHECK(g.a[0] == Catch::Approx(6.0).epsilon(1e-14));

  // A second backward on a fresh tape accumulates into the same sink.
  Tape t2;
  Var v2 = t2.param(x.a.data(), g.a.data(), 1, 1);
  t2.backward(t2.sum_all(v2));
  CHECK(g.a[0] == Catch::Approx(7.0).epsilon(1e-14));
}

TEST_CASE("reset clears the graph and keeps leaves reusable", "[ad]") {
  Tape t;
  Mat x = mat_of(1, 2, {1.0, 2.0});
  Mat g(1, 2);
  Var v = t.param(x.a.data(), g.a.data(), 1, 2);
  t.backward(t.sum_all(v));
  CHECK(g.a[0] == 1.0);
  const size_t before = t.node_count();
  t.reset();
  CHECK(t.node_count() == 0);
  Var v2 = t.param(x.a.data(), g.a.data(), 1, 2);
  t.backward(t.sum_all(t.square(v2)));
  CHECK(t.node_count() == 3);
  CHECK(before == 2);
  CHECK(g.a[1] == Catch::Approx(1.0 + 4.0).epsilon(1e-14));
}

// ---- graph-level Gaussian composites ----

TEST_CASE("graph product matches plain product", "[ad]") {
  Mat m1 = random_mat(1, 4, RngKey{51});
  Mat p1 = random_pos(1, 4, RngKey{52});
  Mat m2 = random_mat(1, 4, RngKey{53});
  Mat p2 = random_pos(1, 4, RngKey{54});

  Tape t;
  Mat g1(1, 4), g2(1, 4), g3(1, 4), g4(1, 4);
  mdmm::ad::GaussV a{t.param(m1.a.data(), g1.a.data(), 1, 4), t.param(p1.a.data(), g2.a.data(), 1, 4)};
  mdmm::ad::GaussV b{t.param(m2.a.data(), g3.a.data(), 1, 4), t.param(p2.a.data(), g4.a.data(), 1, 4)};
  DiagGaussian got = mdmm::ad::freeze(t, mdmm::ad::product(t, a, b));
  DiagGaussian want = mdmm::product(DiagGaussian(m1.a, p1.a), DiagGaussian(m2.a, p2.a));
  for (int i = 0; i < 4; ++i) {
    CHECK(got.mean[i] == Catch::Approx(want.mean[i]).epsilon(1e-14));
    CHECK(got.prec[i] == Catch::Approx(want.prec[i]).epsilon(1e-14));
  }
}

TEST_CASE("graph fuse_quotient matches plain fuse when valid", "[ad]") {
  Mat bm = random_mat(1, 3, RngKey{61});
  Mat bp = random_pos(1, 3, RngKey{62}, 2.0, 4.0);
  Mat nm = random_mat(1, 3, RngKey{63});
  Mat np = random_pos(1, 3, RngKey{64}, 1.5, 3.0);
  Mat dm = random_mat(1, 3, RngKey{65});
  Mat dp = random_pos(1, 3, RngKey{66}, 0.2, 1.0);  // below num precision: valid quotient

  Tape t;
  Mat sink(1, 3);
  auto leaf = [&](Mat& m) { return t.param(m.a.data(), sink.a.data(), 1, 3); };
  mdmm::ad::GaussV base{leaf(bm), leaf(bp)};
  mdmm::ad::GaussV num{leaf(nm), leaf(np)};
  mdmm::ad::GaussV den{leaf(dm), leaf(dp)};
  DiagGaussian got = mdmm::ad::freeze(t, mdmm::ad::fuse_quotient(t, base, num, den));

  mdmm::GaussianQuotientFactor q;
  q.numerators = {DiagGaussian(bm.a, bp.a), DiagGaussian(nm.a, np.a)};
  q.denominators = {DiagGaussian(dm.a, dp.a)};
  DiagGaussian want = mdmm::fuse(q);
  for (int i = 0; i < 3; ++i) {
    CHECK(got.mean[i] == Catch::Approx(want.mean[i]).epsilon(1e-12));
    CHECK(got.prec[i] == Catch::Approx(want.prec[i]).epsilon(1e-12));
  }
}

TEST_CASE("fuse_quotient guard drops non-positive dims from the graph value", "[ad]") {
  // Denominator precision exceeds base+numerator in dim 0 only.
  Mat bm = mat_of(1, 2, {1.0, 1.0});
  Mat bp = mat_of(1, 2, {0.5, 2.0});
  Mat nm = mat_of(1, 2, {2.0, -1.0});
  Mat np = mat_of(1, 2, {0.4, 1.0});
  Mat dm = mat_of(1, 2, {-3.0, 0.5});
  Mat dp = mat_of(1, 2, {5.0, 0.5});

  Tape t;
  Mat sink(1, 2);
  auto leaf = [&](Mat& m) { return t.param(m.a.data(), sink.a.data(), 1, 2); };
  mdmm::ad::GaussV out = mdmm::ad::fuse_quotient(t, {leaf(bm), leaf(bp)}, {leaf(nm), leaf(np)},
                                                 {leaf(dm), leaf(dp)});
  DiagGaussian got = mdmm::ad::freeze(t, out);

  // Dim 0 falls back to the base factor alone; dim 1 fuses normally.
  CHECK(got.prec[0] == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(got.mean[0] == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(got.prec[1] == Catch::Approx(2.0 + 1.0 - 0.5).epsilon(1e-14));
}

TEST_CASE("moment_match_rows matches plain moment_match", "[ad]") {
  const int k = 6, d = 3;
  Mat means = random_mat(k, d, RngKey{71});
  Mat precs = random_pos(k, d, RngKey{72});

  Tape t;
  Mat s1(k, d), s2(k, d);
  mdmm::ad::RowGaussV rows{t.param(means.a.data(), s1.a.data(), k, d),
                           t.param(precs.a.data(), s2.a.data(), k, d)};
  DiagGaussian got = mdmm::ad::freeze(t, mdmm::ad::moment_match_rows(t, rows));

  std::vector<DiagGaussian> comps;
  for (int r = 0; r < k; ++r) comps.emplace_back(means.row(r), precs.row(r));
  DiagGaussian want = mdmm::moment_match(comps);
  for (int i = 0; i < d; ++i) {
    CHECK(got.mean[i] == Catch::Approx(want.mean[i]).epsilon(1e-13));
    CHECK(got.prec[i] == Catch::Approx(want.prec[i]).epsilon(1e-13));
  }
}

TEST_CASE("moment_match_rows gradients match central differences", "[ad]") {
  const int k = 4, d = 2;
  Mat means = random_mat(k, d, RngKey{81});
  Mat precs = random_pos(k, d, RngKey{82});
  Mat cm = random_mat(1, d, RngKey{83});
  Mat cp = random_mat(1, d, RngKey{84});

  FdProblem p{{means, precs}, [&](Tape& t, const std::vector<Var>& vs) {
                mdmm::ad::GaussV mm = mdmm::ad::moment_match_rows(t, {vs[0], vs[1]});
                Var a = t.sum_all(t.mul(mm.mean, t.constant(cm.a, 1, d)));
                Var b = t.sum_all(t.mul(mm.prec, t.constant(cp.a, 1, d)));
                return t.add(a, b);
              }};
  CHECK(oracle::fd_max_rel_err(p) < 1e-6);
}

TEST_CASE("sample_rows matches plain sampling draw for draw", "[ad]") {
  Mat m = random_mat(1, 5, RngKey{91});
  Mat pr = random_pos(1, 5, RngKey{92});
  const int k = 7;

  Tape t;
  Mat s1(1, 5), s2(1, 5);
  mdmm::ad::GaussV g{t.param(m.a.data(), s1.a.data(), 1, 5), t.param(pr.a.data(), s2.a.data(), 1, 5)};
  Rng r1(RngKey{4242});
  Var z = mdmm::ad::sample_rows(t, g, k, r1);

  Rng r2(RngKey{4242});
  Mat want = mdmm::sample(DiagGaussian(m.a, pr.a), k, r2);
  const double* got = t.value_ptr(z);
  for (size_t i = 0; i < want.a.size(); ++i)
    CHECK(got[i] == Catch::Approx(want.a[i]).epsilon(1e-12));
}

TEST_CASE("reparameterized sample gradients flow to mean and precision", "[ad]") {
  Mat m = random_mat(1, 3, RngKey{101});
  Mat pr = random_pos(1, 3, RngKey{102});
  Mat c = random_mat(4, 3, RngKey{103});

  // Same rng seed on every evaluation: eps is a common random number, so the
  // map (mean, prec) -> samples is deterministic and differentiable.
  FdProblem p{{m, pr}, [&](Tape& t, const std::vector<Var>& vs) {
                Rng rng(RngKey{777});
                Var z = mdmm::ad::sample_rows(t, {vs[0], vs[1]}, 4, rng);
                return t.sum_all(t.mul(z, t.constant(c.a, 4, 3)));
              }};
  CHECK(oracle::fd_max_rel_err(p) < 1e-6);
}

TEST_CASE("kl composites agree with plain kl", "[ad]") {
  Mat ma = random_mat(1, 3, RngKey{111});
  Mat ta = random_pos(1, 3, RngKey{112});
  Mat mb = random_mat(1, 3, RngKey{113});
  Mat tb = random_pos(1, 3, RngKey{114});

  Tape t;
  Mat sink(1, 3);
  auto leaf = [&](Mat& mm) { return t.param(mm.a.data(), sink.a.data(), 1, 3); };
  Var v = mdmm::ad::kl_single(t, {leaf(ma), leaf(ta)}, {leaf(mb), leaf(tb)});
  CHECK(t.scalar(v) ==
        Catch::Approx(mdmm::kl(DiagGaussian(ma.a, ta.a), DiagGaussian(mb.a, tb.a))).epsilon(1e-13));
}

TEST_CASE("deep composite gradient: fuse, sample, moment match, kl", "[ad]") {
  // End-to-end chain exercising every composite the filter uses.
  Mat bm = random_mat(1, 3, RngKey{121});
  Mat bp = random_pos(1, 3, RngKey{122}, 1.0, 2.0);
  Mat nm = random_mat(1, 3, RngKey{123});
  Mat np = random_pos(1, 3, RngKey{124}, 1.0, 2.0);
  Mat dm = random_mat(1, 3, RngKey{125});
  Mat dp = random_pos(1, 3, RngKey{126}, 0.1, 0.6);

  FdProblem p{{bm, bp, nm, np, dm, dp}, [](Tape& t, const std::vector<Var>& vs) {
                mdmm::ad::GaussV fused = mdmm::ad::fuse_quotient(
                    t, {vs[0], vs[1]}, {vs[2], vs[3]}, {vs[4], vs[5]});
                Rng rng(RngKey{31337});
                Var z = mdmm::ad::sample_rows(t, fused, 5, rng);
                // Pretend the samples parameterize row Gaussians with unit precision.
                mdmm::ad::RowGaussV rows{z, t.add_c(t.mul_c(z, 0.0), 1.0)};
                mdmm::ad::GaussV mm = mdmm::ad::moment_match_rows(t, rows);
                return mdmm::ad::kl_single(t, fused, mm);
              }};
  CHECK(oracle::fd_max_rel_err(p, 1e-5, 1e-6) < 1e-5);
}

#include "rigidreg/graph.hpp"

#include <cmath>

#include "doctest.h"
#include "rigidreg/adam.hpp"
#include "rigidreg/geom3d.hpp"
#include "rigidreg/random.hpp"

using namespace rigidreg;
using namespace rigidreg::ad;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> dims, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(dims));
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

// loss = sum(output .* fixed coefficients); probes every output direction.
Ref dot_loss(Graph& g, Ref out, TensorMap& bind, Rng& rng, const std::string& cname) {
  Ref c = g.input(cname, g.dims_of(out));
  bind[cname] = random_tensor(rng, g.dims_of(out));
  return g.sum(g.mul(out, c));
}

double fd_check(const Graph& g, Ref loss, const TensorMap& bind,
                const std::vector<std::string>& which, double h = 1e-5) {
  return grad_check(g, loss, bind, h, which).max_rel_err;
}

}  // namespace

TEST_CASE("relu forward") {
  Graph g;
  Ref x = g.input("x", {2});
  g.mark_output("y", g.relu(x));
  TensorMap bind;
  bind["x"] = Tensor::zeros({2});
  bind["x"](0) = -1.0;
  bind["x"](1) = 2.0;
  TensorMap out = eval_outputs(g, bind);
  CHECK(out["y"](0) == 0.0);
  CHECK(out["y"](1) == 2.0);
}

TEST_CASE("context_norm zeroes a constant column") {
  Graph g;
  Ref x = g.input("x", {5, 2});
  g.mark_output("y", g.context_norm(x));
  TensorMap bind;
  bind["x"] = Tensor::zeros({5, 2});
  Rng rng(3);
  for (int i = 0; i < 5; ++i) {
    bind["x"](i, 0) = 7.25;  // constant channel
    bind["x"](i, 1) = rng.normal();
  }
  TensorMap out = eval_outputs(g, bind);
  for (int i = 0; i < 5; ++i) CHECK(out["y"](i, 0) == 0.0);
}

TEST_CASE("context_norm is bit-exact under permutation and duplication") {
  Rng rng(5);
  const int n = 33, c = 7;
  Tensor x = random_tensor(rng, {n, c});

  Graph g;
  Ref xr = g.input("x", {n, c});
  g.mark_output("y", g.context_norm(xr));
  TensorMap bind{{"x", x}};
  Tensor y = eval_outputs(g, bind)["y"];

  // permutation
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  rng.shuffle(perm);
  Tensor xp = Tensor::zeros({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) xp(i, j) = x(perm[static_cast<size_t>(i)], j);
  TensorMap bp{{"x", xp}};
  Tensor yp = eval_outputs(g, bp)["y"];
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) CHECK(yp(i, j) == y(perm[static_cast<size_t>(i)], j));

  // duplication
  Graph g2;
  Ref xr2 = g2.input("x", {2 * n, c});
  g2.mark_output("y", g2.context_norm(xr2));
  Tensor xd = Tensor::zeros({2 * n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      xd(2 * i, j) = x(i, j);
      xd(2 * i + 1, j) = x(i, j);
    }
  TensorMap bd{{"x", xd}};
  Tensor yd = eval_outputs(g2, bd)["y"];
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      CHECK(yd(2 * i, j) == y(i, j));
      CHECK(yd(2 * i + 1, j) == y(i, j));
    }
}

TEST_CASE("max_pool_rows value is permutation-invariant, gradient takes first tie") {
  Graph g;
  Ref x = g.param("x", {4, 2});
  Ref y = g.max_pool_rows(x);
  Ref loss = g.sum(y);
  TensorMap bind;
  bind["x"] = Tensor::zeros({4, 2});
  // channel 0 has a tie between rows 1 and 3
  bind["x"](0, 0) = 0.0; bind["x"](1, 0) = 5.0; bind["x"](2, 0) = 1.0; bind["x"](3, 0) = 5.0;
  bind["x"](0, 1) = -1.0; bind["x"](1, 1) = -2.0; bind["x"](2, 1) = 3.0; bind["x"](3, 1) = 0.0;
  TensorMap gr = grad(g, loss, bind);
  CHECK(gr["x"](1, 0) == 1.0);
  CHECK(gr["x"](3, 0) == 0.0);  // documented: first index wins
  CHECK(gr["x"](2, 1) == 1.0);
}

TEST_CASE("tanh gradient at zero is one") {
  Graph g;
  Ref x = g.param("x", {5});
  Ref loss = g.sum(g.tanh(x));
  TensorMap bind{{"x", Tensor::zeros({5})}};
  TensorMap gr = grad(g, loss, bind);
  for (int i = 0; i < 5; ++i) CHECK(gr["x"](i) == 1.0);
}

TEST_CASE("finite differences: dense and elementwise primitives") {
  Rng rng(7);
  TensorMap bind;
  Graph g;
  Ref x = g.param("x", {4, 3});
  Ref w = g.param("w", {3, 5});
  Ref b = g.param("b", {5});
  bind["x"] = random_tensor(rng, {4, 3});
  bind["w"] = random_tensor(rng, {3, 5});
  bind["b"] = random_tensor(rng, {5});

  Ref a = g.affine(x, w, b);                    // [4,5]
  Ref t = g.transpose(a);                       // [5,4]
  Ref mm = g.matmul(t, a);                      // [5,5] hits matmul both sides
  Ref sq = g.square(g.tanh(mm));
  Ref sg = g.sigmoid(g.scale(sq, 0.3));
  Ref loss = dot_loss(g, sg, bind, rng, "c0");
  CHECK(fd_check(g, loss, bind, {"x", "w", "b"}) < 1e-4);
}

TEST_CASE("finite differences: row ops, reductions, concat, slice") {
  Rng rng(11);
  TensorMap bind;
  Graph g;
  Ref x = g.param("x", {6, 4});
  Ref r = g.param("r", {4});
  Ref w = g.param("w", {6});
  Ref s = g.param("s", {});
  bind["x"] = random_tensor(rng, {6, 4});
  bind["r"] = random_tensor(rng, {4});
  bind["w"] = random_tensor(rng, {6});
  bind["s"] = Tensor::scalar(1.7);

  Ref v1 = g.row_scale(g.add_row(x, r), w);
  Ref v2 = g.scale_by(v1, g.reciprocal(s));
  Ref rs = g.row_sum(g.abs(v2));                // [6]
  Ref m1 = g.mean(rs);
  Ref flat = g.reshape(v2, {24});
  Ref sl = g.slice(flat, 3, 11);
  Ref cc = g.concat_cols(v2, x);                // [6,8]
  Ref loss0 = dot_loss(g, cc, bind, rng, "c0");
  Ref loss1 = dot_loss(g, sl, bind, rng, "c1");
  Ref loss = g.add(g.add(loss0, loss1), m1);
  CHECK(fd_check(g, loss, bind, {"x", "r", "w", "s"}) < 1e-4);
}

TEST_CASE("finite differences: context_norm, max_pool, concat_rows, conv2d") {
  Rng rng(13);
  TensorMap bind;
  Graph g;
  Ref x = g.param("x", {9, 6});
  Ref k = g.param("k", {2, 3, 3});
  Ref kb = g.param("kb", {2});
  bind["x"] = random_tensor(rng, {9, 6});
  bind["k"] = random_tensor(rng, {2, 3, 3});
  bind["kb"] = random_tensor(rng, {2});

  Ref cn = g.context_norm(x);
  Ref p0 = g.max_pool_rows(cn);                            // [6]
  Ref p1 = g.max_pool_rows(g.relu(x));                     // [6]
  Ref p2 = g.max_pool_rows(g.square(x));                   // [6]
  Ref st = g.concat_rows({p0, p1, p2});                    // [3,6]
  Ref cv = g.conv2d(g.context_norm(st), k, kb, 1, 2);      // [2,1,2]
  Ref loss = dot_loss(g, cv, bind, rng, "c0");
  CHECK(fd_check(g, loss, bind, {"x", "k", "kb"}) < 1e-4);
}

TEST_CASE("finite differences: geman_mcclure and bce_with_logits") {
  Rng rng(17);
  TensorMap bind;
  Graph g;
  Ref s = g.param("s", {7});
  Ref o = g.param("o", {7});
  bind["s"] = Tensor::zeros({7});
  for (int i = 0; i < 7; ++i) bind["s"](i) = rng.uniform(0.01, 4.0);
  bind["o"] = random_tensor(rng, {7}, 2.0);

  Ref y = g.input("y", {7});
  Ref gamma = g.input("gamma", {7});
  bind["y"] = Tensor::zeros({7});
  bind["gamma"] = Tensor::zeros({7});
  for (int i = 0; i < 7; ++i) {
    bind["y"](i) = rng.uniform01() < 0.5 ? 0.0 : 1.0;
    bind["gamma"](i) = rng.uniform(0.2, 2.0);
  }

  Ref gm = g.sum(g.geman_mcclure(s, 1.3));
  Ref ce = g.bce_with_logits(o, y, gamma);
  Ref loss = g.add(gm, ce);
  CHECK(fd_check(g, loss, bind, {"s", "o"}) < 1e-4);
}

TEST_CASE("bce_with_logits value matches the direct formula") {
  Graph g;
  Ref o = g.input("o", {2});
  Ref y = g.input("y", {2});
  Ref w = g.input("w", {2});
  g.mark_output("loss", g.bce_with_logits(o, y, w));
  TensorMap bind;
  bind["o"] = Tensor::zeros({2});
  bind["y"] = Tensor::zeros({2});
  bind["w"] = Tensor::zeros({2});
  bind["o"](0) = 0.7; bind["o"](1) = -1.2;
  bind["y"](0) = 1.0; bind["y"](1) = 0.0;
  bind["w"](0) = 1.5; bind["w"](1) = 0.5;
  auto sp = [](double v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, 0.0); };
  double expect = (1.5 * (sp(0.7) - 0.7) + 0.5 * sp(-1.2)) / 2.0;
  CHECK(eval_outputs(g, bind)["loss"].data[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("finite differences: svd3") {
  Rng rng(19);
  TensorMap bind;
  Graph g;
  Ref m = g.param("m", {3, 3});
  bind["m"] = random_tensor(rng, {3, 3});

  auto [u, s, v] = g.svd3(m);
  Ref lu = dot_loss(g, u, bind, rng, "cu");
  Ref ls = dot_loss(g, s, bind, rng, "cs");
  Ref lv = dot_loss(g, v, bind, rng, "cv");
  Ref loss = g.add(g.add(lu, ls), lv);
  CHECK(fd_check(g, loss, bind, {"m"}, 1e-6) < 1e-4);
}

TEST_CASE("finite differences: svd3 batched") {
  Rng rng(23);
  TensorMap bind;
  Graph g;
  Ref m = g.param("m", {2, 3, 3});
  bind["m"] = random_tensor(rng, {2, 3, 3});
  auto [u, s, v] = g.svd3(m);
  Ref loss = g.add(dot_loss(g, u, bind, rng, "cu"), dot_loss(g, s, bind, rng, "cs"));
  CHECK(fd_check(g, loss, bind, {"m"}, 1e-6) < 1e-4);
}

TEST_CASE("finite differences: so3_exp and quat_to_rot") {
  Rng rng(29);
  TensorMap bind;
  Graph g;
  Ref w = g.param("w", {3});
  Ref q = g.param("q", {4});
  bind["w"] = random_tensor(rng, {3}, 0.6);
  bind["q"] = random_tensor(rng, {4});

  Ref loss = g.add(dot_loss(g, g.so3_exp(w), bind, rng, "cr"),
                   dot_loss(g, g.quat_to_rot(q), bind, rng, "cq"));
  CHECK(fd_check(g, loss, bind, {"w", "q"}) < 1e-4);
}

TEST_CASE("finite differences: L1 alignment loss through so3_exp") {
  Rng rng(31);
  const int n = 10;
  TensorMap bind;
  Graph g;
  Ref p = g.input("p", {n, 3});
  Ref q = g.input("q", {n, 3});
  Ref w = g.param("w", {3});
  Ref t = g.param("t", {3});
  bind["p"] = random_tensor(rng, {n, 3});
  bind["q"] = random_tensor(rng, {n, 3});
  bind["w"] = random_tensor(rng, {3}, 0.4);
  bind["t"] = random_tensor(rng, {3}, 0.3);

  Ref rot = g.so3_exp(w);
  Ref e = g.sub(q, g.add_row(g.matmul(p, g.transpose(rot)), t));
  Ref loss = g.scale(g.sum(g.abs(e)), 1.0 / n);
  CHECK(fd_check(g, loss, bind, {"w", "t"}) < 1e-4);
}

TEST_CASE("finite differences: weighted orthogonal alignment head through svd3") {
  Rng rng(37);
  const int n = 10;
  TensorMap bind;
  Graph g;
  Ref p = g.input("p", {n, 3});
  Ref q = g.input("q", {n, 3});
  Ref rgt = g.input("rgt", {3, 3});
  Ref w = g.param("w", {n});

  bind["p"] = random_tensor(rng, {n, 3});
  Eigen::Matrix3d gtrot = so3_exp(Eigen::Vector3d(0.3, -0.5, 0.2));
  bind["q"] = Tensor::zeros({n, 3});
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d pv(bind["p"](i, 0), bind["p"](i, 1), bind["p"](i, 2));
    Eigen::Vector3d qv = gtrot * pv + Eigen::Vector3d(0.1, 0.2, -0.1) +
                         0.05 * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    for (int j = 0; j < 3; ++j) bind["q"](i, j) = qv(j);
  }
  bind["rgt"] = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) bind["rgt"](i, j) = gtrot(i, j);
  bind["w"] = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) bind["w"](i) = rng.uniform(0.45, 0.9);  // clear of tau

  double tau = 0.3;
  Ref mask = g.threshold_mask(w, tau, 3);
  Ref wm = g.mul(w, mask);
  Ref inv_sw = g.reciprocal(g.sum(wm));
  Ref wrow = g.reshape(wm, {1, n});
  Ref cp = g.scale_by(g.matmul(wrow, p), inv_sw);  // [1,3]
  Ref cq = g.scale_by(g.matmul(wrow, q), inv_sw);
  Ref pc = g.add_row(p, g.reshape(g.scale(cp, -1.0), {3}));
  Ref qc = g.add_row(q, g.reshape(g.scale(cq, -1.0), {3}));
  Ref m = g.matmul(g.transpose(g.row_scale(pc, wm)), qc);  // [3,3]
  auto [u, s, v] = g.svd3(m);
  Ref d = g.det_corr3(v, u);
  Ref rot = g.matmul(g.matmul(v, d), g.transpose(u));
  Ref loss = g.sum(g.square(g.sub(rot, rgt)));  // chordal distance
  (void)s;

  CHECK(fd_check(g, loss, bind, {"w"}, 1e-6) < 1e-3);
}

TEST_CASE("grad_check is tight on a linear graph") {
  Rng rng(41);
  TensorMap bind;
  Graph g;
  Ref x = g.param("x", {3, 3});
  Ref w = g.input("cw", {3, 3});
  bind["x"] = random_tensor(rng, {3, 3});
  bind["cw"] = random_tensor(rng, {3, 3});
  Ref loss = g.sum(g.mul(x, w));
  CHECK(fd_check(g, loss, bind, {"x"}) < 1e-10);
}

TEST_CASE("eval rejects shape mismatches and non-finite values") {
  Graph g;
  Ref x = g.input("x", {2, 2});
  g.mark_output("y", g.reciprocal(x));
  TensorMap bad{{"x", Tensor::zeros({3, 2})}};
  CHECK_THROWS(eval_outputs(g, bad));

  TensorMap zero{{"x", Tensor::zeros({2, 2})}};
  CHECK_THROWS(eval_outputs(g, zero));  // 1/0 -> inf is a hard failure

  Graph g2;
  CHECK_THROWS(g2.matmul(g2.input("a", {2, 3}), g2.input("b", {2, 3})));
}

TEST_CASE("eval is deterministic") {
  Rng rng(43);
  Graph g;
  Ref x = g.input("x", {16, 8});
  g.mark_output("y", g.context_norm(g.relu(x)));
  TensorMap bind{{"x", random_tensor(rng, {16, 8})}};
  Tensor a = eval_outputs(g, bind)["y"];
  Tensor b = eval_outputs(g, bind)["y"];
  CHECK(a.data == b.data);
}

TEST_CASE("threshold_mask enforces a minimum selection") {
  Graph g;
  Ref w = g.input("w", {4});
  g.mark_output("m", g.threshold_mask(w, 0.5, 3));
  TensorMap bind{{"w", Tensor::zeros({4})}};
  bind["w"](0) = 0.9;
  bind["w"](1) = 0.8;
  CHECK_THROWS(eval_outputs(g, bind));
  bind["w"](2) = 0.7;
  TensorMap out = eval_outputs(g, bind);
  CHECK(out["m"](0) == 1.0);
  CHECK(out["m"](3) == 0.0);
}

TEST_CASE("adam: zero gradient leaves parameters in place") {
  TensorMap params{{"p", Tensor::scalar(2.5)}};
  TensorMap grads{{"p", Tensor::scalar(0.0)}};
  AdamState st = AdamState::init(params);
  for (int i = 0; i < 5; ++i) adam_step(params, grads, st, 1e-2);
  CHECK(params["p"].data[0] == 2.5);
  CHECK(st.step == 5);
}

TEST_CASE("adam: constant gradient approaches lr * sign(g)") {
  TensorMap params{{"p", Tensor::scalar(0.0)}};
  TensorMap grads{{"p", Tensor::scalar(-3.0)}};
  AdamState st = AdamState::init(params);
  double lr = 1e-3;
  double prev = 0.0;
  double step_size = 0.0;
  for (int i = 0; i < 200; ++i) {
    adam_step(params, grads, st, lr);
    step_size = params["p"].data[0] - prev;
    prev = params["p"].data[0];
  }
  CHECK(step_size == doctest::Approx(lr).epsilon(1e-3));  // moving against g < 0
}

TEST_CASE("adam: quadratic descent") {
  Tensor c = Tensor::zeros({3});
  c(0) = 1.0; c(1) = -2.0; c(2) = 0.5;
  TensorMap params{{"x", Tensor::zeros({3})}};
  AdamState st = AdamState::init(params);
  double prev_dist = 1e30;
  for (int i = 0; i < 100; ++i) {
    Tensor g = Tensor::zeros({3});
    for (int k = 0; k < 3; ++k) g(k) = 2.0 * (params["x"](k) - c(k));
    TensorMap grads{{"x", g}};
    adam_step(params, grads, st, 0.01);
    if (i >= 10) {
      double dist = 0.0;
      for (int k = 0; k < 3; ++k) dist += (params["x"](k) - c(k)) * (params["x"](k) - c(k));
      CHECK(dist <= prev_dist + 1e-12);
      prev_dist = dist;
    }
  }
  CHECK(prev_dist < 3.0);  // squared distance, down from 5.25 at init
}

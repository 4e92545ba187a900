#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "simmc/tensor.hpp"
#include "test_util.hpp"

using namespace simmc;
using testutil::fd_max_rel_err;

static TensorPtr leaf(Shape s, std::vector<double> v) {
    auto t = tensor(std::move(s), std::move(v));
    t->requires_grad = true;
    return t;
}

TEST_CASE("tensor construction and shape checks") {
    auto t = tensor({2, 3}, 1.5);
    CHECK(t->numel() == 6);
    CHECK(t->values[5] == 1.5);
    CHECK(t->grad.size() == 6);
    CHECK_THROWS_AS(tensor({2, 3}, std::vector<double>{1.0}), ShapeError);
    CHECK_THROWS_AS(tensor({0, 3}), ShapeError);
    CHECK_THROWS_AS(t->item(), ContractError);
    CHECK(scalar(4.0)->item() == 4.0);
}

TEST_CASE("matmul values and gradient") {
    auto a = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = leaf({3, 2}, {7, 8, 9, 10, 11, 12});
    Tape tape;
    auto c = matmul(a, b, &tape);
    REQUIRE(c->shape == Shape{2, 2});
    CHECK(c->values == std::vector<double>{58, 64, 139, 154});
    auto s = sum(c, &tape);
    CHECK(fd_max_rel_err(tape, s, {a, b}) < 1e-6);
}

TEST_CASE("matmul with row-vector lhs") {
    auto a = leaf({3}, {1, 2, 3});
    auto b = leaf({3, 2}, {1, 0, 0, 1, 1, 1});
    Tape tape;
    auto c = matmul(a, b, &tape);
    REQUIRE(c->shape == Shape{2});
    CHECK(c->values == std::vector<double>{4, 5});
    auto s = sum(c, &tape);
    CHECK(fd_max_rel_err(tape, s, {a, b}) < 1e-6);
}

TEST_CASE("matmul shape errors") {
    auto a = tensor({2, 3});
    auto b = tensor({2, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, tensor({3})), ShapeError);
}

TEST_CASE("elementwise ops and broadcasting row add") {
    auto a = leaf({2, 2}, {1, 2, 3, 4});
    auto b = leaf({2, 2}, {5, 6, 7, 8});
    auto r = leaf({2}, {10, 20});
    Tape tape;
    auto s = sum(mul(add(a, b, &tape), add_row(a, r, &tape), &tape), &tape);
    CHECK(fd_max_rel_err(tape, s, {a, b, r}) < 1e-4);
    CHECK_THROWS_AS(add(a, tensor({3})), ShapeError);
    CHECK_THROWS_AS(add_row(a, tensor({3})), ShapeError);
}

TEST_CASE("scale and sum") {
    auto a = leaf({3}, {1, -2, 3});
    Tape tape;
    auto s = sum(scale(a, 2.5, &tape), &tape);
    CHECK(s->item() == Catch::Approx(5.0));
    CHECK(fd_max_rel_err(tape, s, {a}) < 1e-6);
}

TEST_CASE("row, col_slice, transpose round trips") {
    auto a = leaf({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tape tape;
    auto r1 = row(a, 1, &tape);
    CHECK(r1->values == std::vector<double>{5, 6, 7, 8});
    auto cs = col_slice(a, 1, 3, &tape);
    CHECK(cs->values == std::vector<double>{2, 3, 6, 7});
    auto tr = transpose(a, &tape);
    CHECK(tr->shape == Shape{4, 2});
    CHECK(tr->values == std::vector<double>{1, 5, 2, 6, 3, 7, 4, 8});
    auto s = sum(mul(cs, cs, &tape), &tape);
    CHECK(fd_max_rel_err(tape, s, {a}) < 1e-4);
    CHECK_THROWS_AS(row(a, 2), ShapeError);
    CHECK_THROWS_AS(col_slice(a, 3, 3), ShapeError);
    CHECK_THROWS_AS(col_slice(a, 0, 5), ShapeError);
}

TEST_CASE("concat ops") {
    auto a = leaf({2, 2}, {1, 2, 3, 4});
    auto b = leaf({2, 1}, {9, 10});
    Tape tape;
    auto cc = col_concat({a, b}, &tape);
    CHECK(cc->shape == Shape{2, 3});
    CHECK(cc->values == std::vector<double>{1, 2, 9, 3, 4, 10});
    auto v1 = leaf({2}, {1, 2});
    auto rr = concat_rows({a, v1}, &tape);
    CHECK(rr->shape == Shape{3, 2});
    CHECK(rr->values == std::vector<double>{1, 2, 3, 4, 1, 2});
    auto vc = vec_concat({v1, v1}, &tape);
    CHECK(vc->shape == Shape{4});
    auto s = sum(mul(cc, cc, &tape), &tape);
    CHECK(fd_max_rel_err(tape, s, {a, b}) < 1e-4);
    CHECK_THROWS_AS(col_concat({a, tensor({3, 1})}), ShapeError);
    CHECK_THROWS_AS(concat_rows({a, tensor({3})}), ShapeError);
}

TEST_CASE("gelu matches erf form and gradient") {
    auto a = leaf({5}, {-2.0, -0.5, 0.0, 0.5, 2.0});
    Tape tape;
    auto g = gelu(a, &tape);
    CHECK(g->values[2] == 0.0);
    CHECK(g->values[3] == Catch::Approx(0.5 * 0.5 * (1.0 + std::erf(0.5 / std::sqrt(2.0)))));
    auto s = sum(g, &tape);
    CHECK(fd_max_rel_err(tape, s, {a}) < 1e-4);
}

TEST_CASE("sigmoid value, saturation, and backward at zero") {
    auto a = leaf({3}, {0.0, 100.0, -100.0});
    Tape tape;
    auto s = sigmoid(a, &tape);
    CHECK(s->values[0] == 0.5);
    // In 64-bit arithmetic these saturate to the representable limits.
    CHECK(s->values[1] == 1.0);
    CHECK(s->values[2] == Catch::Approx(3.7200759760208356e-44).margin(1e-40));
    backward(tape, sum(s, &tape));
    CHECK(a->grad[0] == Catch::Approx(0.25));
}

TEST_CASE("softmax rows: normalization, shift invariance, gradient") {
    auto a = leaf({2, 3}, {1.0, 2.0, 3.0, -1.0, 0.0, 1.0});
    Tape tape;
    auto p = softmax(a, 1, &tape);
    for (int i = 0; i < 2; ++i) {
        double rowsum = p->values[i * 3] + p->values[i * 3 + 1] + p->values[i * 3 + 2];
        CHECK(rowsum == Catch::Approx(1.0).epsilon(1e-12));
    }
    auto shifted = tensor({2, 3});
    for (int i = 0; i < 6; ++i) shifted->values[i] = a->values[i] + 17.3;
    auto p2 = softmax(shifted, 1);
    for (int i = 0; i < 6; ++i)
        CHECK(std::abs(p->values[i] - p2->values[i]) <= 1e-12);
    auto s = sum(mul(p, p, &tape), &tape);
    CHECK(fd_max_rel_err(tape, s, {a}) < 1e-4);
    CHECK_THROWS_AS(softmax(a, 2), ShapeError);
    CHECK_THROWS_AS(softmax(a, -3), ShapeError);
}

TEST_CASE("softmax along axis 0") {
    auto a = leaf({2, 2}, {1.0, 5.0, 3.0, 5.0});
    auto p = softmax(a, 0);
    CHECK(p->values[0] + p->values[2] == Catch::Approx(1.0));
    CHECK(p->values[1] == Catch::Approx(0.5));
}

TEST_CASE("layer_norm statistics and gradient") {
    auto x = leaf({2, 4}, {1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -3.0});
    auto g = leaf({4}, {1.0, 1.0, 1.0, 1.0});
    auto b = leaf({4}, {0.0, 0.0, 0.0, 0.0});
    Tape tape;
    auto y = layer_norm(x, g, b, &tape);
    for (int i = 0; i < 2; ++i) {
        double mean = 0.0;
        for (int j = 0; j < 4; ++j) mean += y->values[i * 4 + j];
        CHECK(mean / 4 == Catch::Approx(0.0).margin(1e-9));
    }
    auto s = sum(mul(y, y, &tape), &tape);
    CHECK(fd_max_rel_err(tape, s, {x, g, b}) < 1e-4);
    CHECK_THROWS_AS(layer_norm(x, tensor({3}), b), ShapeError);
}

TEST_CASE("cosine similarity value, gradient, degenerate input") {
    auto u = leaf({2}, {1.0, 1.0});
    auto v = leaf({2}, {1.0, 0.0});
    Tape tape;
    auto c = cosine_similarity(u, v, &tape);
    CHECK(c->item() == Catch::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-9));
    CHECK(fd_max_rel_err(tape, c, {u, v}) < 1e-4);
    auto z = tensor({2});
    CHECK_THROWS_AS(cosine_similarity(u, z), DegenerateInputError);
    CHECK_THROWS_AS(cosine_similarity(u, tensor({3}, 1.0)), ShapeError);
}

TEST_CASE("mean_vecs averages and distributes gradient") {
    auto a = leaf({2}, {1.0, 2.0});
    auto b = leaf({2}, {3.0, 6.0});
    Tape tape;
    auto m = mean_vecs({a, b}, &tape);
    CHECK(m->values == std::vector<double>{2.0, 4.0});
    auto s = sum(mul(m, m, &tape), &tape);
    CHECK(fd_max_rel_err(tape, s, {a, b}) < 1e-4);
    CHECK_THROWS_AS(mean_vecs({}), ShapeError);
    CHECK_THROWS_AS(mean_vecs({a, tensor({3})}), ShapeError);
}

TEST_CASE("embed gathers rows and scatter-adds gradient on repeats") {
    auto table = leaf({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
    Tape tape;
    auto e = embed(table, {2, 0, 2}, &tape);
    CHECK(e->shape == Shape{3, 2});
    CHECK(e->values == std::vector<double>{20, 21, 0, 1, 20, 21});
    backward(tape, sum(e, &tape));
    CHECK(table->grad[4] == 2.0);  // id 2 used twice
    CHECK(table->grad[0] == 1.0);
    CHECK(table->grad[2] == 0.0);
    CHECK_THROWS_AS(embed(table, {4}), LabelError);
    CHECK_THROWS_AS(embed(table, {-1}), LabelError);
    CHECK_THROWS_AS(embed(table, {}), ShapeError);
}

TEST_CASE("bce_loss reference values and clamp") {
    auto p = leaf({1}, {0.5});
    Tape tape;
    auto l = bce_loss(p, 1, &tape);
    CHECK(l->item() == Catch::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(std::abs(l->item() - 0.693147) < 1e-6);
    CHECK(fd_max_rel_err(tape, l, {p}) < 1e-4);

    auto sure = scalar(1.0);
    CHECK(bce_loss(sure, 1)->item() <= 1.1e-7);
    auto wrong = scalar(1.0);
    CHECK(bce_loss(wrong, 0)->item() >= 15.0);  // -log(1e-7)
    CHECK_THROWS_AS(bce_loss(p, 2), LabelError);
    CHECK_THROWS_AS(bce_loss(tensor({2}, 0.5), 1), ShapeError);
}

TEST_CASE("bce_logits_loss matches -log sigmoid and keeps saturated gradients") {
    auto z = leaf({1}, {0.7});
    Tape tape;
    auto l = bce_logits_loss(z, 1, &tape);
    CHECK(l->item() == Catch::Approx(-std::log(1.0 / (1.0 + std::exp(-0.7)))).epsilon(1e-12));
    CHECK(fd_max_rel_err(tape, l, {z}) < 1e-4);

    auto z0 = leaf({1}, {0.0});
    CHECK(bce_logits_loss(z0, 0)->item() == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(bce_logits_loss(z0, 1)->item() == Catch::Approx(std::log(2.0)).epsilon(1e-12));

    // A pair 500 logits on the wrong side still reports a linear loss and a
    // full-strength gradient; the sigmoid->bce composition returns zero here.
    auto far = leaf({1}, {-500.0});
    Tape t2;
    auto lf = bce_logits_loss(far, 1, &t2);
    CHECK(lf->item() == Catch::Approx(500.0).epsilon(1e-12));
    backward(t2, lf);
    CHECK(far->grad[0] == Catch::Approx(-1.0).epsilon(1e-12));

    auto near = leaf({1}, {500.0});
    CHECK(bce_logits_loss(near, 1)->item() < 1e-200);
    CHECK_THROWS_AS(bce_logits_loss(z, 2), LabelError);
    CHECK_THROWS_AS(bce_logits_loss(tensor({2}, 0.5), 1), ShapeError);
}

TEST_CASE("ce_loss uniform logits and gradient") {
    auto z = leaf({4}, {0.7, 0.7, 0.7, 0.7});
    Tape tape;
    auto l = ce_loss(z, 2, &tape);
    CHECK(l->item() == Catch::Approx(std::log(4.0)).epsilon(1e-9));
    CHECK(std::abs(l->item() - 1.386294) < 1e-6);
    CHECK(fd_max_rel_err(tape, l, {z}) < 1e-4);
    CHECK_THROWS_AS(ce_loss(z, 4), LabelError);
    CHECK_THROWS_AS(ce_loss(z, -1), LabelError);
}

TEST_CASE("loss dispatcher routes by kind") {
    auto p = scalar(0.5);
    CHECK(loss(p, 1, LossKind::BCE)->item() == Catch::Approx(std::log(2.0)));
    auto z = tensor({2}, std::vector<double>{0.0, 0.0});
    CHECK(loss(z, 0, LossKind::CE)->item() == Catch::Approx(std::log(2.0)));
}

TEST_CASE("ce_rows masks inactive rows and averages the rest") {
    auto z = leaf({3, 4}, std::vector<double>(12, 0.0));
    z->values[0] = 5.0;  // row 0 prefers class 0
    Tape tape;
    auto l = ce_rows(z, {0, 1, 3}, {1, 0, 1}, &tape);
    // Row 1 is masked out; row 2 is uniform -> ln 4.
    double row0 = -5.0 + std::log(std::exp(5.0) + 3.0);
    CHECK(l->item() == Catch::Approx((row0 + std::log(4.0)) / 2.0).epsilon(1e-9));
    CHECK(fd_max_rel_err(tape, l, {z}) < 1e-4);
    CHECK_THROWS_AS(ce_rows(z, {0, 1}, {1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(ce_rows(z, {0, 9, 0}, {1, 1, 1}), LabelError);
    CHECK_THROWS_AS(ce_rows(z, {0, 1, 2}, {0, 0, 0}), ContractError);
}

TEST_CASE("backward requires a scalar root") {
    auto a = leaf({2}, {1.0, 2.0});
    Tape tape;
    auto b = scale(a, 2.0, &tape);
    CHECK_THROWS_AS(backward(tape, b), ContractError);
}

TEST_CASE("replay reproduces recorded outputs exactly") {
    Rng rng(derive_seed(7, "replay"));
    auto a = randn({3, 3}, rng, 1.0);
    auto b = randn({3, 3}, rng, 1.0);
    Tape tape;
    auto c = matmul(a, gelu(b, &tape), &tape);
    auto p = softmax(c, 1, &tape);
    auto s = sum(p, &tape);
    std::vector<double> snap_p = p->values, snap_s = s->values;
    // Scramble intermediates, then replay with unchanged leaves.
    std::fill(p->values.begin(), p->values.end(), -7.0);
    s->values[0] = 99.0;
    replay(tape);
    CHECK(p->values == snap_p);
    CHECK(s->values == snap_s);
}

TEST_CASE("no tape means no recording") {
    auto a = leaf({2}, {1.0, 2.0});
    Tape tape;
    auto b = scale(a, 3.0);  // no tape passed
    CHECK(tape.size() == 0);
    CHECK_FALSE(b->requires_grad);
    auto c = scale(a, 3.0, &tape);
    CHECK(tape.size() == 1);
    CHECK(c->requires_grad);
}

TEST_CASE("ops on frozen inputs record nothing") {
    auto a = tensor({2, 2}, 1.0);  // requires_grad stays false
    Tape tape;
    auto b = matmul(a, a, &tape);
    CHECK(tape.size() == 0);
    CHECK_FALSE(b->requires_grad);
}

TEST_CASE("gradient accumulates across two backward calls") {
    auto a = leaf({1}, {3.0});
    Tape t1;
    auto l1 = scale(a, 2.0, &t1);
    backward(t1, l1);
    Tape t2;
    auto l2 = scale(a, 4.0, &t2);
    backward(t2, l2);
    CHECK(a->grad[0] == 6.0);
}

TEST_CASE("composite graph end-to-end gradient") {
    Rng rng(derive_seed(11, "composite"));
    auto x = randn({3, 4}, rng, 0.5);
    auto w = randn({4, 4}, rng, 0.5);
    auto g = tensor({4}, 1.0);
    g->requires_grad = true;
    auto b = randn({4}, rng, 0.1);
    Tape tape;
    auto h = layer_norm(gelu(matmul(x, w, &tape), &tape), g, b, &tape);
    auto p = softmax(h, 1, &tape);
    auto lossv = ce_rows(p, {0, 1, 2}, {1, 1, 1}, &tape);
    CHECK(fd_max_rel_err(tape, lossv, {x, w, g, b}) < 1e-3);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "saefd/gated_sae.hpp"
#include "test_helpers.hpp"

using namespace saefd;
namespace fs = std::filesystem;

namespace {

// Hand-constructible SAE with explicit tensors.
template <typename T>
GatedSae<T> manual_sae(Mat<T> w_gate, Mat<T> w_enc, Mat<T> w_dec, Mat<T> b_gate, Mat<T> b_enc,
                       Mat<T> b_dec, bool trainable = false) {
    GatedSae<T> s;
    s.dict = static_cast<int>(w_gate.rows());
    s.d = static_cast<int>(w_gate.cols());
    auto mk = [&](Mat<T> m) {
        return trainable ? ag::Var<T>::param(std::move(m)) : ag::Var<T>::constant(std::move(m));
    };
    s.w_gate = mk(std::move(w_gate));
    s.w_enc = mk(std::move(w_enc));
    s.w_dec = mk(std::move(w_dec));
    s.b_gate = mk(std::move(b_gate));
    s.b_enc = mk(std::move(b_enc));
    s.b_dec = mk(std::move(b_dec));
    return s;
}

template <typename T>
GatedSae<T> random_sae(int d, int dict, std::uint64_t seed, bool trainable) {
    Rng rng(seed);
    Mat<T> wg(dict, d), we(dict, d), wd(dict, d), bg(1, dict), be(1, dict), bd(1, d);
    rng.fill_normal(wg, T(0.6));
    rng.fill_normal(we, T(0.6));
    rng.fill_normal(wd, T(1));
    for (Eigen::Index k = 0; k < wd.rows(); ++k) wd.row(k) /= wd.row(k).norm();
    rng.fill_normal(bg, T(0.2));
    rng.fill_normal(be, T(0.2));
    rng.fill_normal(bd, T(0.2));
    return manual_sae<T>(wg, we, wd, bg, be, bd, trainable);
}

}  // namespace

TEST_CASE("gated encode: hand-computed scalar cases") {
    // d = D = 1, W_gate = [1], W_enc = [2], all biases zero
    auto sae = manual_sae<double>(MatD::Constant(1, 1, 1.0), MatD::Constant(1, 1, 2.0),
                                  MatD::Constant(1, 1, 1.0), MatD::Zero(1, 1), MatD::Zero(1, 1),
                                  MatD::Zero(1, 1));
    auto h = ag::Var<double>::constant(MatD::Constant(1, 1, 1.0));
    const double f_pre = encode_pre_relu(sae, h).item();
    REQUIRE_THAT(f_pre, Catch::Matchers::WithinAbs(2.0 / (1.0 + std::exp(-1.0)), 1e-12));
    REQUIRE_THAT(f_pre, Catch::Matchers::WithinAbs(1.46211715726, 1e-9));

    auto hneg = ag::Var<double>::constant(MatD::Constant(1, 1, -1.0));
    const double f_pre_neg = encode_pre_relu(sae, hneg).item();
    REQUIRE_THAT(f_pre_neg, Catch::Matchers::WithinAbs(-0.53788284274, 1e-9));
    REQUIRE(encode(sae, hneg).item() == 0.0);        // ReLU clips the negative value
    REQUIRE(encode(sae, h).item() == f_pre);         // and is the identity on positives

    // all-zero weights and biases force f_pre = 0
    auto zero = manual_sae<double>(MatD::Zero(3, 2), MatD::Zero(3, 2), MatD::Zero(3, 2),
                                   MatD::Zero(1, 3), MatD::Zero(1, 3), MatD::Zero(1, 2));
    MatD any(4, 2);
    any << 1, -2, 3, 4, -5, 6, 0.5, 0;
    REQUIRE(encode_pre_relu_value(zero, any).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("post-relu features are nonnegative and match positives") {
    auto sae = random_sae<double>(4, 12, 3, false);
    Rng rng(4);
    MatD h(16, 4);
    rng.fill_normal(h);
    const MatD pre = encode_pre_relu_value(sae, h);
    const MatD post = encode_value(sae, h);
    REQUIRE(post.minCoeff() >= 0.0);
    for (Eigen::Index i = 0; i < pre.rows(); ++i)
        for (Eigen::Index j = 0; j < pre.cols(); ++j)
            if (pre(i, j) > 0) REQUIRE(post(i, j) == pre(i, j));
}

TEST_CASE("decode: empty sum, one-hot, linearity") {
    auto sae = random_sae<double>(3, 6, 5, false);
    ag::NoGradGuard ng;

    const MatD bdec = sae.b_dec.value();
    auto zero_f = ag::Var<double>::constant(MatD::Zero(1, 6));
    REQUIRE(decode(sae, zero_f).value() == bdec);

    MatD onehot = MatD::Zero(1, 6);
    onehot(0, 2) = 2.5;
    const MatD got = decode(sae, ag::Var<double>::constant(onehot)).value();
    const MatD expect = 2.5 * sae.w_dec.value().row(2) + bdec;
    REQUIRE((got - expect).cwiseAbs().maxCoeff() < 1e-15);

    MatD f1 = MatD::Zero(1, 6), f2 = MatD::Zero(1, 6);
    f1 << 1, 0, 2, 0, 0.5, 0;
    f2 << 0, 3, 0, 1, 0, 0.25;
    const MatD d12 = decode(sae, ag::Var<double>::constant((f1 + f2).eval())).value() - bdec;
    const MatD d1 = decode(sae, ag::Var<double>::constant(f1)).value() - bdec;
    const MatD d2 = decode(sae, ag::Var<double>::constant(f2)).value() - bdec;
    REQUIRE((d12 - (d1 + d2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("encode/decode round-trip keeps the input shape") {
    auto sae = random_sae<double>(5, 15, 6, false);
    Rng rng(7);
    MatD h(9, 5);
    rng.fill_normal(h);
    ag::NoGradGuard ng;
    const MatD recon = decode(sae, encode(sae, ag::Var<double>::constant(h))).value();
    REQUIRE(recon.rows() == h.rows());
    REQUIRE(recon.cols() == h.cols());
}

TEST_CASE("sae loss: trivial reconstruction, term removal, nonnegativity") {
    // zero-weight encoder, b_dec = c: feeding copies of c gives zero loss
    MatD bdec(1, 2);
    bdec << 0.7, -0.3;
    auto sae = manual_sae<double>(MatD::Zero(4, 2), MatD::Zero(4, 2), MatD::Zero(4, 2),
                                  MatD::Zero(1, 4), MatD::Zero(1, 4), bdec);
    MatD batch = bdec.replicate(5, 1);
    const auto parts = sae_loss(sae, batch, 1e-3);
    REQUIRE(parts.total.item() == 0.0);
    REQUIRE(parts.recon_mse == 0.0);
    REQUIRE(parts.l1_term == 0.0);

    auto rnd = random_sae<double>(3, 9, 8, false);
    Rng rng(9);
    MatD h(7, 3);
    rng.fill_normal(h);
    const auto with_l1 = sae_loss(rnd, h, 1e-3);
    const auto no_l1 = sae_loss(rnd, h, 0.0);
    REQUIRE(no_l1.l1_term == 0.0);
    REQUIRE_THAT(no_l1.total.item(), Catch::Matchers::WithinAbs(no_l1.recon_mse, 1e-15));
    REQUIRE(with_l1.recon_mse >= 0.0);
    REQUIRE(with_l1.l1_term >= 0.0);
    REQUIRE_THAT(with_l1.total.item(),
                 Catch::Matchers::WithinAbs(with_l1.recon_mse + with_l1.l1_term, 1e-15));
}

TEST_CASE("sae loss gradients match finite differences on random instances") {
    Rng meta(1234);
    for (int instance = 0; instance < 20; ++instance) {
        const int d = 2 + static_cast<int>(meta.below(7));      // <= 8
        const int dict = d * 2 + static_cast<int>(meta.below(8));  // <= 32 for d <= 8
        auto sae = random_sae<double>(d, dict, meta.next_u64(), true);
        auto h = ag::Var<double>::param(MatD::Zero(3, d));
        Rng rng(meta.next_u64());
        rng.fill_normal(h.value());

        auto build = [&] { return sae_loss(sae, h, 1e-3).total; };
        std::vector<ag::Var<double>> checked = sae.params();
        checked.push_back(h);  // input gradient flows through recon and residual
        for (auto& var : checked) {
            const MatD analytic = testutil::analytic_grad(var, build);
            const MatD numeric = testutil::numeric_grad(var, [&] { return build().item(); });
            REQUIRE(testutil::max_rel_err(analytic, numeric) < 5e-5);
        }
    }
}

TEST_CASE("variance explained: near-perfect reconstruction and degenerate cases") {
    // pass-through SAE: g ~ 1 (huge gate bias), m = h, decoder row e_0
    MatD wg = MatD::Zero(2, 1), we = MatD::Zero(2, 1), wd = MatD::Zero(2, 1);
    we(0, 0) = 1.0;
    wd(0, 0) = 1.0;
    MatD bg(1, 2);
    bg << 30.0, -30.0;
    auto sae = manual_sae<double>(wg, we, wd, bg, MatD::Zero(1, 2), MatD::Zero(1, 1));
    MatD h(6, 1);
    h << 1.0, 2.0, 0.5, 3.0, 1.5, 2.5;  // positive so ReLU passes them through
    REQUIRE(variance_explained(sae, h) > 1.0 - 1e-9);

    // constant reconstruction explains nothing
    auto blind = manual_sae<double>(MatD::Zero(2, 1), MatD::Zero(2, 1), MatD::Zero(2, 1),
                                    MatD::Zero(1, 2), MatD::Zero(1, 2), MatD::Constant(1, 1, 9.0));
    REQUIRE_THAT(variance_explained(blind, h), Catch::Matchers::WithinAbs(0.0, 1e-12));

    REQUIRE_THROWS_AS(variance_explained(sae, MatD(MatD::Constant(5, 1, 2.0))), usage_error);
    REQUIRE_THROWS_AS(variance_explained(sae, MatD(MatD::Zero(1, 1))), usage_error);
}

TEST_CASE("l0 sparsity counts strictly positive features") {
    REQUIRE(l0_sparsity(MatD(MatD::Zero(4, 8))) == 0.0);
    REQUIRE(l0_sparsity(MatD(MatD::Constant(4, 8, 0.5))) == 8.0);
    MatD f(2, 3);
    f << 1.0, 0.0, 0.2, 0.0, 0.0, 3.0;
    REQUIRE(l0_sparsity(f) == 1.5);
}

TEST_CASE("train_sae: improves, renormalizes, freezes, deterministic") {
    Rng rng(42);
    // synthetic activations from a sparse dictionary so the SAE has structure to find
    const int d = 8, n = 512;
    MatD dict(4, d);
    rng.fill_normal(dict);
    MatD h(n, d);
    for (int i = 0; i < n; ++i) {
        MatD row = MatD::Zero(1, d);
        for (int k = 0; k < 4; ++k)
            if (rng.uniform() < 0.3) row += std::abs(rng.normal()) * dict.row(k);
        for (int j = 0; j < d; ++j) row(0, j) += 0.01 * rng.normal();
        h.row(i) = row;
    }
    const MatD holdout = h.topRows(64);

    SaeTrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 64;
    cfg.lr = 3e-3;

    auto init = GatedSae<double>::init(d, 4, 7);
    const double loss_before = sae_loss(init, holdout, cfg.l1_coeff).total.item();
    auto trained = train_sae(init, h, cfg, 99);
    const double loss_after = sae_loss(trained, holdout, cfg.l1_coeff).total.item();
    REQUIRE(loss_after <= loss_before);
    REQUIRE(trained.frozen());
    for (Eigen::Index k = 0; k < trained.w_dec.value().rows(); ++k)
        REQUIRE_THAT(trained.w_dec.value().row(k).norm(), Catch::Matchers::WithinAbs(1.0, 1e-5));
    REQUIRE_THROWS_AS(trained.renormalize_decoder(), usage_error);

    auto trained2 = train_sae(GatedSae<double>::init(d, 4, 7), h, cfg, 99);
    REQUIRE(trained2.checksum() == trained.checksum());
    auto trained3 = train_sae(GatedSae<double>::init(d, 4, 7), h, cfg, 100);
    REQUIRE(trained3.checksum() != trained.checksum());

    REQUIRE_THROWS_AS(train_sae(GatedSae<double>::init(d, 4, 7), MatD(holdout.topRows(8)), cfg, 1),
                      config_error);  // corpus smaller than a batch
}

TEST_CASE("sae checkpoints round-trip byte-identically") {
    auto sae = random_sae<float>(6, 18, 77, false);
    const std::string p1 = (fs::temp_directory_path() / "saefd_sae1.sfdm").string();
    const std::string p2 = (fs::temp_directory_path() / "saefd_sae2.sfdm").string();
    save_sae(p1, sae);
    auto loaded = load_sae<float>(p1);
    REQUIRE(loaded.d == 6);
    REQUIRE(loaded.dict == 18);
    REQUIRE(loaded.frozen());
    REQUIRE(loaded.checksum() == sae.checksum());
    save_sae(p2, loaded);
    REQUIRE(file_checksum(p1) == file_checksum(p2));
    fs::remove(p1);
    fs::remove(p2);
}

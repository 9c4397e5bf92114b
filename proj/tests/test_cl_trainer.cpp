#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "saefd/cl_trainer.hpp"

using namespace saefd;

namespace {

struct Setup {
    TaskSequence seq;
    BaseModel<float> model;
    GatedSae<float> sae;

    explicit Setup(int tasks = 3) {
        TaskGenConfig gc;
        gc.num_tasks = tasks;
        gc.num_classes = 3;
        gc.d_in = 8;
        gc.seq_len_min = 2;
        gc.seq_len_max = 5;
        gc.train_size = 60;
        gc.test_size = 24;
        gc.epochs_per_task.assign(static_cast<std::size_t>(tasks), 1);
        gc.interference.kappa = 0.2;
        gc.interference.conflict_fraction = 0.6;
        seq = generate_task_sequence(gc, 71);
        model = BaseModel<float>::init(8, 16, 8, 5);

        const auto corpus = generate_sae_corpus(seq, 1, 60, 9);
        const auto adapter = LoraAdapter<float>::init(model, 2, 8.f, 0.f, 0);
        const MatF acts = last_token_activations(model, adapter, corpus);
        SaeTrainConfig sc;
        sc.epochs = 6;
        sc.batch_size = 32;
        sc.lr = 3e-3;
        sae = train_sae(GatedSae<float>::init(16, 2, 1), acts, sc, 2);
    }

    RunConfig config(Mode mode) const {
        RunConfig rc;
        rc.mode = mode;
        rc.batch_size = 16;
        rc.anchors_per_task = 10;
        rc.lora_rank = 2;
        rc.lora_alpha = 8.0;
        rc.lora_dropout = 0.05;
        rc.lr = 5e-3;
        rc.probe_samples = 12;
        return rc;
    }
};

}  // namespace

TEST_CASE("protocol shape: rows, buffer growth, task-1 has no distillation") {
    Setup s;
    AnchorBuffer buffer;
    const auto res = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::saefd), 100, &buffer);

    REQUIRE(res.matrix.num_tasks() == 3);
    for (int i = 1; i <= 3; ++i) REQUIRE(res.matrix.row_present(i));  // row t has t entries

    // anchors captured for every task including the last
    REQUIRE(buffer.size() == 3 * 10);
    REQUIRE(buffer.per_task_counts().size() == 3);

    // no trace rows for task 1 (Alg. else-branch), rows exist from task 2 on
    REQUIRE_FALSE(res.lambda_trace.empty());
    for (const auto& row : res.lambda_trace) REQUIRE(row.task_id >= 2);

    // ve drift recorded before task 1 and after each task
    REQUIRE(res.ve_drift.size() == 4);
    for (double v : res.ve_drift) REQUIRE(std::isfinite(v));

    // frozen things stayed frozen
    REQUIRE(res.base_checksum_before == res.base_checksum_after);
    REQUIRE(res.sae_checksum_before == res.sae_checksum_after);

    // peaks are the diagonal
    for (int t = 1; t <= 3; ++t)
        REQUIRE(res.per_task[static_cast<std::size_t>(t - 1)].peak == res.matrix.at(t, t));
}

TEST_CASE("seq_only equals saefd with the distillation gradient forced to zero") {
    Setup s;
    const auto seq_res = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::seq_only), 42);

    RunConfig forced = s.config(Mode::saefd);
    forced.force_lambda_zero = true;
    const auto forced_res = run_sequence(s.model, s.seq, &s.sae, forced, 42);

    // identical RNG streams + zero distillation contribution = bit-identical run
    REQUIRE(seq_res.adapter_checksum == forced_res.adapter_checksum);
    for (int i = 1; i <= 3; ++i)
        for (int t = 1; t <= i; ++t) REQUIRE(seq_res.matrix.at(i, t) == forced_res.matrix.at(i, t));

    // and the real saefd run differs (the distillation term actually acts)
    const auto real_res = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::saefd), 42);
    REQUIRE(real_res.adapter_checksum != seq_res.adapter_checksum);
}

TEST_CASE("seq_only runs without an SAE and emits no lambda trace or drift") {
    Setup s;
    const auto res = run_sequence<float>(s.model, s.seq, nullptr, s.config(Mode::seq_only), 7);
    REQUIRE(res.lambda_trace.empty());
    REQUIRE(res.ve_drift.empty());
    REQUIRE(res.matrix.num_tasks() == 3);

    REQUIRE_THROWS_AS(run_sequence<float>(s.model, s.seq, nullptr, s.config(Mode::saefd), 7),
                      usage_error);
}

TEST_CASE("fixed-lambda mode logs a constant lambda") {
    Setup s;
    RunConfig rc = s.config(Mode::fixed_lambda);
    rc.fixed_lambda_value = 1.0;
    const auto res = run_sequence(s.model, s.seq, &s.sae, rc, 11);
    REQUIRE_FALSE(res.lambda_trace.empty());
    for (const auto& row : res.lambda_trace) REQUIRE(row.lambda == 1.0);
}

TEST_CASE("raw_mse and single-term modes run without error") {
    Setup s;
    const auto raw = run_sequence<float>(s.model, s.seq, nullptr, s.config(Mode::raw_mse), 13);
    REQUIRE_FALSE(raw.lambda_trace.empty());
    const auto cos = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::cosine_only), 13);
    const auto mag = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::magnitude_only), 13);
    REQUIRE(cos.matrix.num_tasks() == 3);
    REQUIRE(mag.matrix.num_tasks() == 3);
}

TEST_CASE("runs are deterministic per seed") {
    Setup s;
    const auto a = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::saefd), 555);
    const auto b = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::saefd), 555);
    REQUIRE(a.adapter_checksum == b.adapter_checksum);
    REQUIRE(a.lambda_trace.size() == b.lambda_trace.size());
    for (std::size_t i = 0; i < a.lambda_trace.size(); ++i) {
        REQUIRE(a.lambda_trace[i].lambda == b.lambda_trace[i].lambda);
        REQUIRE(a.lambda_trace[i].l_task == b.lambda_trace[i].l_task);
    }
    const auto c = run_sequence(s.model, s.seq, &s.sae, s.config(Mode::saefd), 556);
    REQUIRE(a.adapter_checksum != c.adapter_checksum);
}

TEST_CASE("zero head predicts class 0 everywhere") {
    Setup s;
    const auto adapter = LoraAdapter<float>::init(s.model, 2, 8.f, 0.f, 3);
    const auto head = TaskHead<float>::zeros(3, s.model.d);
    const double acc = evaluate(s.model, adapter, head, s.seq[0].test);
    int zeros = 0;
    for (int label : s.seq[0].test.labels) zeros += (label == 0) ? 1 : 0;
    REQUIRE_THAT(acc, Catch::Matchers::WithinAbs(
                          static_cast<double>(zeros) / s.seq[0].test.batch, 1e-12));

    // evaluation is deterministic
    REQUIRE(evaluate(s.model, adapter, head, s.seq[0].test) == acc);
}

TEST_CASE("overfit sanity: 32 samples memorized to accuracy 1.0") {
    TaskGenConfig gc;
    gc.num_tasks = 1;
    gc.num_classes = 3;
    gc.d_in = 8;
    gc.seq_len_min = 2;
    gc.seq_len_max = 4;
    gc.train_size = 32;
    gc.test_size = 32;
    gc.epochs_per_task = {50};
    auto seq = generate_task_sequence(gc, 5);
    seq[0].test = seq[0].train;  // evaluate on the training samples themselves

    const auto model = BaseModel<float>::init(8, 16, 8, 5);
    RunConfig rc;
    rc.mode = Mode::seq_only;
    rc.batch_size = 8;
    rc.lr = 1e-2;
    rc.lora_rank = 2;
    rc.lora_alpha = 8.0;
    rc.lora_dropout = 0.0;
    rc.anchors_per_task = 4;
    const auto res = run_sequence<float>(model, seq, nullptr, rc, 8);
    REQUIRE(res.matrix.at(1, 1) == 1.0);
}

TEST_CASE("train_task rejects a buffer that already covers the task") {
    Setup s;
    AnchorBuffer buffer;
    buffer.set_dims(8, 16);
    const auto adapter0 = LoraAdapter<float>::init(s.model, 2, 8.f, 0.f, 1);
    buffer.append(capture_anchors(s.model, adapter0, s.seq[1], 4, 9));  // task 2 anchors

    LoraAdapter<float> adapter = LoraAdapter<float>::init(s.model, 2, 8.f, 0.f, 2);
    LambdaController lambda{LambdaConfig{}};
    detail::RunContext ctx;
    ctx.seed = 1;
    ctx.dropout = Rng(1);
    ctx.anchor_sample = Rng(2);
    TaskRunLog log;
    REQUIRE_THROWS_AS(train_task(s.model, adapter, s.seq[1], buffer, &s.sae, lambda,
                                 s.config(Mode::saefd), ctx, log),
                      usage_error);
}

TEST_CASE("csv writers produce the expected headers") {
    namespace fs = std::filesystem;
    const std::string vp = (fs::temp_directory_path() / "saefd_ve.csv").string();
    write_ve_drift_csv(vp, {0.95, 0.93, 0.91});
    std::ifstream vin(vp);
    std::string line;
    std::getline(vin, line);
    REQUIRE(line == "after_task,ve_pct");
    std::getline(vin, line);
    REQUIRE(line == "0,95.0000");
    fs::remove(vp);

    const std::string tp = (fs::temp_directory_path() / "saefd_timings.csv").string();
    TaskRunLog l;
    l.task_id = 1;
    l.steps = 10;
    l.mean_step_ms = 1.5;
    l.train_seconds = 0.015;
    write_timings_csv(tp, {l});
    std::ifstream tin(tp);
    std::getline(tin, line);
    REQUIRE(line == "task_id,steps,mean_step_ms,train_seconds");
    fs::remove(tp);
}

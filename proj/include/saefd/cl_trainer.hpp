#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "saefd/anchor_store.hpp"
#include "saefd/common.hpp"
#include "saefd/distill_loss.hpp"
#include "saefd/gated_sae.hpp"
#include "saefd/lambda_controller.hpp"
#include "saefd/metrics.hpp"
#include "saefd/optim.hpp"
#include "saefd/rng.hpp"
#include "saefd/synth_tasks.hpp"
#include "saefd/toy_model.hpp"

// Sequential training loop. Per task: train the shared adapter plus a fresh
// task head (task loss, and for tasks with a nonempty anchor buffer the
// mode's distillation term weighted by lambda), then evaluate on all tasks
// seen so far, then capture anchors. Each RNG-consuming phase has its own
// stream, so e.g. anchor sampling never shifts the batch order or dropout
// masks of the task-loss path.

namespace saefd {

enum class Mode { saefd, seq_only, fixed_lambda, raw_mse, cosine_only, magnitude_only };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::saefd: return "saefd";
        case Mode::seq_only: return "seq_only";
        case Mode::fixed_lambda: return "fixed_lambda";
        case Mode::raw_mse: return "raw_mse";
        case Mode::cosine_only: return "cosine_only";
        case Mode::magnitude_only: return "magnitude_only";
    }
    return "?";
}

inline Mode mode_from_name(const std::string& s) {
    for (Mode m : {Mode::saefd, Mode::seq_only, Mode::fixed_lambda, Mode::raw_mse,
                   Mode::cosine_only, Mode::magnitude_only})
        if (s == mode_name(m)) return m;
    throw config_error("train.mode: unknown mode '" + s + "'");
}

inline bool mode_uses_distillation(Mode m) { return m != Mode::seq_only; }
inline bool mode_uses_sae(Mode m) {
    return m == Mode::saefd || m == Mode::fixed_lambda || m == Mode::cosine_only ||
           m == Mode::magnitude_only;
}

struct RunConfig {
    Mode mode = Mode::saefd;
    double fixed_lambda_value = 1.0;
    int anchors_per_task = 200;
    LambdaConfig lambda;
    double lr = 1e-4;
    int batch_size = 32;
    int grad_accum = 1;
    double warmup_frac = 0.1;
    double weight_decay = 0.0;
    int anchor_batch_size = 0;  // 0 -> batch_size
    double threshold_frac = 0.10;
    int lora_rank = 8;
    double lora_alpha = 32.0;
    double lora_dropout = 0.1;
    int probe_samples = 500;
    std::uint64_t probe_seed = 99;
    bool force_lambda_zero = false;  // test hook: keep the distillation path and
                                     // its RNG draws but drop its gradient

    void validate() const {
        if (lr <= 0) throw config_error("train.lr must be positive");
        if (batch_size < 1) throw config_error("train.batch_size must be >= 1");
        if (grad_accum < 1) throw config_error("train.grad_accum must be >= 1");
        if (warmup_frac < 0 || warmup_frac >= 1)
            throw config_error("train.warmup_frac must be in [0, 1)");
        if (weight_decay < 0) throw config_error("train.weight_decay must be nonnegative");
        if (anchors_per_task < 1) throw config_error("train.anchors_per_task must be >= 1");
        if (anchor_batch_size < 0) throw config_error("train.anchor_batch_size must be >= 0");
        if (threshold_frac < 0 || threshold_frac >= 1)
            throw config_error("train.threshold_frac must be in [0, 1)");
        if (probe_samples < 2) throw config_error("train.probe_samples must be >= 2");
        if (mode == Mode::fixed_lambda && fixed_lambda_value <= 0)
            throw config_error("train.fixed_lambda must be positive");
        lambda.validate();
    }
};

struct TaskRunLog {
    int task_id = 0;
    int steps = 0;
    double peak = 0.0;       // a_{t,t}
    double final_acc = 0.0;  // a_{T,t}, filled after the last task
    double mean_step_ms = 0.0;
    double train_seconds = 0.0;
};

struct RunResult {
    AccuracyMatrix matrix;
    std::vector<LambdaTraceRow> lambda_trace;
    std::vector<double> ve_drift;  // empty, or T+1 values (before task 1, then after each task)
    std::vector<TaskRunLog> per_task;
    std::uint64_t base_checksum_before = 0, base_checksum_after = 0;
    std::uint64_t sae_checksum_before = 0, sae_checksum_after = 0;
    std::uint64_t adapter_checksum = 0;  // digest of the trained adapter state
};

namespace detail {

enum : std::uint64_t {
    kTagAdapterInit = 1'000'000,
    kTagDropout = 1'000'001,
    kTagAnchorSample = 1'000'002,
    kTagBatchShuffle = 1'100'000,  // + task id
    kTagProbe = 1'200'000,         // + task id
};

struct RunContext {
    std::uint64_t seed = 0;
    Rng dropout{0};
    Rng anchor_sample{0};
    std::int64_t global_step = 0;
};

}  // namespace detail

template <typename T>
double evaluate(const BaseModel<T>& model, const LoraAdapter<T>& adapter, const TaskHead<T>& head,
                const SampleBatch& test, int chunk = 256) {
    if (test.batch < 1) throw usage_error("evaluate: empty test set");
    ag::NoGradGuard ng;
    int correct = 0;
    for (int lo = 0; lo < test.batch; lo += chunk) {
        std::vector<int> idx;
        for (int i = lo; i < std::min(test.batch, lo + chunk); ++i) idx.push_back(i);
        const SampleBatch part = test.subset(idx);
        const auto pb = PackedBatch<T>::from(part);
        const auto out = forward(model, adapter, head, pb, false, nullptr);
        const Mat<T>& logits = out.logits.value();
        for (Eigen::Index b = 0; b < logits.rows(); ++b) {
            int best = 0;  // argmax, ties to the lowest index
            for (Eigen::Index k = 1; k < logits.cols(); ++k)
                if (logits(b, k) > logits(b, best)) best = static_cast<int>(k);
            correct += (best == part.labels[static_cast<std::size_t>(b)]) ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test.batch);
}

// Last non-padding token's activation per sample; the probe/corpus extraction.
template <typename T>
Mat<T> last_token_activations(const BaseModel<T>& model, const LoraAdapter<T>& adapter,
                              const SampleBatch& batch, int chunk = 512) {
    ag::NoGradGuard ng;
    Mat<T> out(batch.batch, model.d);
    for (int lo = 0; lo < batch.batch; lo += chunk) {
        std::vector<int> idx;
        for (int i = lo; i < std::min(batch.batch, lo + chunk); ++i) idx.push_back(i);
        const SampleBatch part = batch.subset(idx);
        const auto pb = PackedBatch<T>::from(part);
        const Mat<T> acts = collect_activations(model, adapter, pb);
        for (int b = 0; b < part.batch; ++b)
            out.row(lo + b) = acts.row(pb.offsets[static_cast<std::size_t>(b) + 1] - 1);
    }
    return out;
}

template <typename T>
TaskHead<T> train_task(const BaseModel<T>& model, LoraAdapter<T>& adapter, const TaskData& task,
                       const AnchorBuffer& buffer, const GatedSae<T>* sae,
                       LambdaController& lambda, const RunConfig& cfg,
                       detail::RunContext& ctx, TaskRunLog& log) {
    const int t = task.spec.task_id;
    if (mode_uses_sae(cfg.mode)) {
        if (sae == nullptr) throw usage_error("train_task: mode requires an SAE");
        if (!sae->frozen()) throw usage_error("train_task: SAE must be frozen");
    }
    for (const auto& [tid, n] : buffer.per_task_counts())
        if (static_cast<int>(tid) >= t)
            throw usage_error("train_task: buffer already holds task " + std::to_string(tid));

    const bool distill = mode_uses_distillation(cfg.mode) && !buffer.empty();
    const int n = task.train.batch;
    const int micro = cfg.batch_size;
    const int group = micro * cfg.grad_accum;
    const int steps_per_epoch = (n + group - 1) / group;
    const std::int64_t total_steps =
        static_cast<std::int64_t>(steps_per_epoch) * task.spec.epochs;
    const auto warmup_steps =
        static_cast<std::int64_t>(std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
    const int anchor_bs = cfg.anchor_batch_size > 0 ? cfg.anchor_batch_size : cfg.batch_size;

    TaskHead<T> head = TaskHead<T>::zeros(task.spec.num_classes, model.d);
    std::vector<ag::Var<T>> params = adapter.trainable();
    for (auto& p : head.trainable()) params.push_back(p);
    typename AdamW<T>::Options opt_cfg;
    opt_cfg.weight_decay = static_cast<T>(cfg.weight_decay);
    AdamW<T> opt(params, opt_cfg);

    Rng shuffle_rng(derive_seed(ctx.seed, detail::kTagBatchShuffle + static_cast<std::uint64_t>(t)));

    std::int64_t task_step = 0;
    double total_ms = 0.0;
    for (int epoch = 0; epoch < task.spec.epochs; ++epoch) {
        const std::vector<int> order = shuffle_rng.permutation(n);
        for (int g = 0; g < steps_per_epoch; ++g) {
            const auto start = std::chrono::steady_clock::now();
            const double lr = warmup_const_lr(cfg.lr, task_step, warmup_steps);
            opt.zero_grad();

            const int glo = g * group;
            const int ghi = std::min(n, glo + group);
            const int micros = (ghi - glo + micro - 1) / micro;
            for (int m = 0; m < micros; ++m) {
                const int lo = glo + m * micro;
                const int hi = std::min(ghi, lo + micro);
                std::vector<int> idx(order.begin() + lo, order.begin() + hi);
                const SampleBatch sb = task.train.subset(idx);
                const auto pb = PackedBatch<T>::from(sb);
                auto out = forward(model, adapter, head, pb, true, &ctx.dropout);
                auto l_task = task_loss(out.logits, pb.labels);
                const double l_task_val = static_cast<double>(l_task.item());
                if (!std::isfinite(l_task_val))
                    throw numerical_error("train_task: non-finite task loss (task " +
                                          std::to_string(t) + ", step " +
                                          std::to_string(ctx.global_step) + ")");
                ag::Var<T> total = ag::scale(l_task, T(1) / static_cast<T>(micros));

                if (m == 0 && distill) {
                    const auto recs = buffer.sample_batch(anchor_bs, ctx.anchor_sample);
                    const auto ab = make_anchor_batch<T>(recs, model.d);
                    // Recompute current activations on the anchor inputs with
                    // gradient state; dropout stays off so the drift signal is
                    // deterministic given the parameters.
                    auto h_curr = encode_tokens(model, adapter, ag::Var<T>::constant(ab.tokens),
                                                false, nullptr);
                    ag::Var<T> l_fd;
                    switch (cfg.mode) {
                        case Mode::saefd:
                        case Mode::fixed_lambda:
                            l_fd = fd_loss(*sae, h_curr, ab.activations,
                                           static_cast<T>(cfg.threshold_frac), true, true)
                                       .total;
                            break;
                        case Mode::cosine_only:
                            l_fd = fd_loss(*sae, h_curr, ab.activations,
                                           static_cast<T>(cfg.threshold_frac), true, false)
                                       .total;
                            break;
                        case Mode::magnitude_only:
                            l_fd = fd_loss(*sae, h_curr, ab.activations,
                                           static_cast<T>(cfg.threshold_frac), false, true)
                                       .total;
                            break;
                        case Mode::raw_mse:
                            l_fd = raw_mse_loss(h_curr, ab.activations);
                            break;
                        case Mode::seq_only:
                            throw usage_error("unreachable");
                    }
                    const double l_fd_val = static_cast<double>(l_fd.item());
                    if (!std::isfinite(l_fd_val))
                        throw numerical_error("train_task: non-finite distillation loss (task " +
                                              std::to_string(t) + ", step " +
                                              std::to_string(ctx.global_step) + ")");
                    // Alg. order: update lambda, then compose the total loss.
                    const double lam = lambda.update(l_task_val, l_fd_val, ctx.global_step, t);
                    if (!cfg.force_lambda_zero)
                        total = ag::add(total, ag::scale(l_fd, static_cast<T>(lam)));
                }
                total.backward();
            }
            opt.step(static_cast<T>(lr));
            ++task_step;
            ++ctx.global_step;
            total_ms += std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - start)
                            .count();
        }
    }
    log.task_id = t;
    log.steps = static_cast<int>(total_steps);
    log.train_seconds = total_ms / 1000.0;
    log.mean_step_ms = total_steps > 0 ? total_ms / static_cast<double>(total_steps) : 0.0;
    return head;
}

template <typename T>
RunResult run_sequence(const BaseModel<T>& model, const TaskSequence& seq, const GatedSae<T>* sae,
                       const RunConfig& cfg, std::uint64_t seed,
                       AnchorBuffer* out_buffer = nullptr) {
    cfg.validate();
    if (seq.empty()) throw config_error("run_sequence: empty task sequence");
    if (mode_uses_sae(cfg.mode) && sae == nullptr)
        throw usage_error("run_sequence: mode '" + std::string(mode_name(cfg.mode)) +
                          "' requires an SAE");

    RunResult result;
    result.base_checksum_before = model.checksum();
    if (sae) result.sae_checksum_before = sae->checksum();

    detail::RunContext ctx;
    ctx.seed = seed;
    ctx.dropout = Rng(derive_seed(seed, detail::kTagDropout));
    ctx.anchor_sample = Rng(derive_seed(seed, detail::kTagAnchorSample));

    LoraAdapter<T> adapter =
        LoraAdapter<T>::init(model, cfg.lora_rank, static_cast<T>(cfg.lora_alpha),
                             static_cast<T>(cfg.lora_dropout),
                             derive_seed(seed, detail::kTagAdapterInit));
    LambdaController lambda = cfg.mode == Mode::fixed_lambda
                                  ? LambdaController::fixed(cfg.fixed_lambda_value)
                                  : LambdaController(cfg.lambda);
    AnchorBuffer buffer;
    buffer.set_dims(model.d_in, model.d);

    // Fixed probe set for the frozen-SAE drift monitor: fresh draws from every
    // task's distribution under the probe seed.
    SampleBatch probe;
    if (sae) {
        const int per_task =
            (cfg.probe_samples + static_cast<int>(seq.size()) - 1) / static_cast<int>(seq.size());
        std::vector<SampleBatch> parts;
        for (const auto& task : seq) {
            Rng rng(derive_seed(cfg.probe_seed,
                                detail::kTagProbe + static_cast<std::uint64_t>(task.spec.task_id)));
            parts.push_back(detail::materialize_stream(task.spec, per_task, 1u << 20, rng));
        }
        int max_len = 1;
        for (const auto& p : parts) max_len = std::max(max_len, p.max_len);
        probe.batch = 0;
        probe.d_in = model.d_in;
        probe.max_len = max_len;
        for (const auto& p : parts) probe.batch += p.batch;
        probe.inputs = MatF::Zero(static_cast<Eigen::Index>(probe.batch) * max_len, model.d_in);
        probe.mask.assign(static_cast<std::size_t>(probe.batch) * static_cast<std::size_t>(max_len),
                          0);
        probe.labels.assign(static_cast<std::size_t>(probe.batch), 0);
        probe.sample_ids.assign(static_cast<std::size_t>(probe.batch), 0);
        int row = 0;
        for (const auto& p : parts)
            for (int b = 0; b < p.batch; ++b, ++row) {
                const int len = p.length(b);
                probe.inputs.block(static_cast<Eigen::Index>(row) * max_len, 0, len, model.d_in) =
                    p.inputs.block(static_cast<Eigen::Index>(b) * p.max_len, 0, len, model.d_in);
                for (int j = 0; j < len; ++j)
                    probe.mask[static_cast<std::size_t>(row) * static_cast<std::size_t>(max_len) +
                               static_cast<std::size_t>(j)] = 1;
            }
        result.ve_drift.push_back(
            variance_explained(*sae, last_token_activations(model, adapter, probe)));
    }

    const int num_tasks = static_cast<int>(seq.size());
    result.matrix = AccuracyMatrix(num_tasks);
    std::vector<TaskHead<T>> heads;
    result.per_task.resize(static_cast<std::size_t>(num_tasks));

    for (int t = 1; t <= num_tasks; ++t) {
        const TaskData& task = seq[static_cast<std::size_t>(t - 1)];
        TaskRunLog& log = result.per_task[static_cast<std::size_t>(t - 1)];
        heads.push_back(train_task(model, adapter, task, buffer, sae, lambda, cfg, ctx, log));

        std::vector<double> row;
        for (int s = 1; s <= t; ++s)
            row.push_back(evaluate(model, adapter, heads[static_cast<std::size_t>(s - 1)],
                                   seq[static_cast<std::size_t>(s - 1)].test));
        log.peak = row.back();
        result.matrix.set_row(t, row);

        if (mode_uses_distillation(cfg.mode))
            buffer.append(capture_anchors(model, adapter, task, cfg.anchors_per_task, seed));
        if (sae)
            result.ve_drift.push_back(
                variance_explained(*sae, last_token_activations(model, adapter, probe)));
    }

    for (int s = 1; s <= num_tasks; ++s)
        result.per_task[static_cast<std::size_t>(s - 1)].final_acc = result.matrix.at(num_tasks, s);
    std::uint64_t ah = 0xcbf29ce484222325ull;
    for (const auto& p : adapter.trainable()) ah = mat_digest(p.value(), ah);
    result.adapter_checksum = ah;
    result.lambda_trace = lambda.trace();
    result.base_checksum_after = model.checksum();
    if (sae) result.sae_checksum_after = sae->checksum();
    if (out_buffer) *out_buffer = std::move(buffer);
    return result;
}

// ---------------------------------------------------------------------------
// Flat-file outputs (matrix.csv is written via AccuracyMatrix::to_csv).

inline void write_ve_drift_csv(const std::string& path, const std::vector<double>& ve) {
    std::ofstream out(path);
    if (!out) throw format_error("cannot open for writing: " + path);
    out << "after_task,ve_pct\n";
    char line[64];
    for (std::size_t i = 0; i < ve.size(); ++i) {
        std::snprintf(line, sizeof(line), "%zu,%.4f\n", i, ve[i] * 100.0);
        out << line;
    }
    if (!out) throw format_error("write failed: " + path);
}

inline void write_timings_csv(const std::string& path, const std::vector<TaskRunLog>& logs) {
    std::ofstream out(path);
    if (!out) throw format_error("cannot open for writing: " + path);
    out << "task_id,steps,mean_step_ms,train_seconds\n";
    char line[96];
    for (const auto& l : logs) {
        std::snprintf(line, sizeof(line), "%d,%d,%.4f,%.4f\n", l.task_id, l.steps, l.mean_step_ms,
                      l.train_seconds);
        out << line;
    }
    if (!out) throw format_error("write failed: " + path);
}

}  // namespace saefd

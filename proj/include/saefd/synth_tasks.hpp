#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "saefd/common.hpp"
#include "saefd/io.hpp"
#include "saefd/rng.hpp"

// Deterministic synthetic sequence-classification tasks. Inputs are built as
// x_j = Q_t (mu_{t,c} + sigma * eps_j): a per-class prototype plus token noise,
// rotated by a per-task mixing basis. Two knobs control how much sequential
// training on task t damages task t-1:
//   kappa             blends each task's basis between a shared one (0) and a
//                     task-specific one (1)
//   conflict_fraction fraction of prototypes copied from the previous task but
//                     assigned a different class label
// Low kappa + high conflict makes naive sequential fine-tuning forget hard.

namespace saefd {

struct InterferenceConfig {
    double kappa = 0.2;
    double conflict_fraction = 0.6;
};

struct TaskGenConfig {
    int num_tasks = 4;
    int num_classes = 5;
    int d_in = 32;
    int seq_len_min = 4;
    int seq_len_max = 12;
    int train_size = 2000;
    int test_size = 500;
    double noise_sigma = 0.5;
    std::vector<int> epochs_per_task;  // empty -> 1 each; else length num_tasks
    InterferenceConfig interference;

    void validate() const {
        if (num_tasks < 1) throw config_error("data.T must be >= 1");
        if (num_classes < 2) throw config_error("data.num_classes must be >= 2");
        if (d_in < 1) throw config_error("data.d_in must be positive");
        if (seq_len_min < 1 || seq_len_max < seq_len_min)
            throw config_error("data.seq_len range invalid: need 1 <= min <= max");
        if (train_size < 1 || test_size < 1)
            throw config_error("data.train_size and data.test_size must be positive");
        if (noise_sigma < 0) throw config_error("data.noise_sigma must be nonnegative");
        if (interference.kappa < 0.0 || interference.kappa > 1.0)
            throw config_error("data.kappa must be in [0,1]");
        if (interference.conflict_fraction < 0.0 || interference.conflict_fraction > 1.0)
            throw config_error("data.conflict_fraction must be in [0,1]");
        if (!epochs_per_task.empty() &&
            static_cast<int>(epochs_per_task.size()) != num_tasks)
            throw config_error("train.epochs_per_task length must equal data.T");
        for (int e : epochs_per_task)
            if (e < 1) throw config_error("train.epochs_per_task entries must be >= 1");
    }
};

struct TaskSpec {
    int task_id = 0;  // 1-based
    int num_classes = 0;
    MatF class_prototypes;  // K x d_in
    MatF mixing_basis;      // d_in x d_in, orthonormal columns
    float noise_sigma = 0;
    int seq_len_min = 0, seq_len_max = 0;
    int epochs = 1;
    int train_size = 0, test_size = 0;
};

// A set of padded sequences. Row b*max_len + j of `inputs` is token j of
// sample b; mask marks real tokens, padded rows are all-zero.
struct SampleBatch {
    int batch = 0;
    int max_len = 0;
    int d_in = 0;
    MatF inputs;                      // (batch*max_len) x d_in
    std::vector<std::uint8_t> mask;   // batch*max_len
    std::vector<int> labels;          // batch
    std::vector<std::uint64_t> sample_ids;  // batch

    int length(int b) const {
        int n = 0;
        for (int j = 0; j < max_len; ++j) n += mask[static_cast<std::size_t>(b * max_len + j)];
        return n;
    }

    void validate() const {
        check_shape(inputs.rows() == static_cast<Eigen::Index>(batch) * max_len &&
                        inputs.cols() == d_in,
                    "SampleBatch: inputs shape mismatch");
        check_shape(mask.size() == static_cast<std::size_t>(batch) * static_cast<std::size_t>(max_len),
                    "SampleBatch: mask length mismatch");
        check_shape(labels.size() == static_cast<std::size_t>(batch), "SampleBatch: label count");
        for (int b = 0; b < batch; ++b) {
            if (length(b) == 0) throw usage_error("SampleBatch: all-padding sequence");
            for (int j = 0; j < max_len; ++j)
                if (!mask[static_cast<std::size_t>(b * max_len + j)] &&
                    inputs.row(b * max_len + j).cwiseAbs().maxCoeff() != 0.0f)
                    throw usage_error("SampleBatch: nonzero content at padded position");
        }
    }

    SampleBatch subset(const std::vector<int>& indices) const {
        SampleBatch out;
        out.batch = static_cast<int>(indices.size());
        out.d_in = d_in;
        int ml = 1;
        for (int b : indices) ml = std::max(ml, length(b));
        out.max_len = ml;
        out.inputs = MatF::Zero(static_cast<Eigen::Index>(out.batch) * ml, d_in);
        out.mask.assign(static_cast<std::size_t>(out.batch) * static_cast<std::size_t>(ml), 0);
        out.labels.resize(indices.size());
        out.sample_ids.resize(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const int b = indices[i];
            const int len = length(b);
            for (int j = 0; j < len; ++j) {
                out.inputs.row(static_cast<Eigen::Index>(i) * ml + j) =
                    inputs.row(static_cast<Eigen::Index>(b) * max_len + j);
                out.mask[i * static_cast<std::size_t>(ml) + static_cast<std::size_t>(j)] = 1;
            }
            out.labels[i] = labels[static_cast<std::size_t>(b)];
            out.sample_ids[i] = sample_ids[static_cast<std::size_t>(b)];
        }
        return out;
    }
};

struct TaskData {
    TaskSpec spec;
    SampleBatch train;
    SampleBatch test;
};

using TaskSequence = std::vector<TaskData>;

namespace detail {

// QR-orthonormalize with the R diagonal sign-fixed positive, so the result is
// a deterministic canonical Q for a given input.
inline MatD orthonormalize(const MatD& m) {
    Eigen::HouseholderQR<MatD> qr(m);
    MatD q = qr.householderQ() * MatD::Identity(m.rows(), m.cols());
    const MatD r = qr.matrixQR().template triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    return q;
}

inline MatD random_orthogonal(int n, Rng& rng) {
    MatD m(n, n);
    rng.fill_normal(m);
    return orthonormalize(m);
}

// RNG stream tags (see derive_seed).
enum : std::uint64_t {
    kTagSharedBasis = 1,
    kTagTaskBasis = 10'000,
    kTagPrototypes = 20'000,
    kTagConflict = 30'000,
    kTagTrainStream = 40'000,
    kTagTestStream = 50'000,
    kTagCorpusPick = 60'000,
    kTagCorpusExtra = 70'000,
    kTagCorpusShuffle = 80'000,
};

inline SampleBatch materialize_stream(const TaskSpec& spec, int count, std::uint64_t id_offset,
                                      Rng& rng) {
    SampleBatch out;
    out.batch = count;
    out.d_in = spec.class_prototypes.cols();
    const MatD q = spec.mixing_basis.cast<double>();
    const MatD protos = spec.class_prototypes.cast<double>();

    std::vector<int> lens(static_cast<std::size_t>(count));
    std::vector<int> classes(static_cast<std::size_t>(count));
    std::vector<MatD> rows(static_cast<std::size_t>(count));
    int max_len = 1;
    for (int i = 0; i < count; ++i) {
        const int len = rng.uniform_int(spec.seq_len_min, spec.seq_len_max);
        const int c = rng.uniform_int(0, spec.num_classes - 1);
        MatD eps(len, out.d_in);
        rng.fill_normal(eps);
        MatD v = (eps * spec.noise_sigma).rowwise() + protos.row(c);
        rows[static_cast<std::size_t>(i)] = v * q.transpose();  // x_j = Q (mu + sigma eps)
        lens[static_cast<std::size_t>(i)] = len;
        classes[static_cast<std::size_t>(i)] = c;
        max_len = std::max(max_len, len);
    }
    out.max_len = max_len;
    out.inputs = MatF::Zero(static_cast<Eigen::Index>(count) * max_len, out.d_in);
    out.mask.assign(static_cast<std::size_t>(count) * static_cast<std::size_t>(max_len), 0);
    out.labels.resize(static_cast<std::size_t>(count));
    out.sample_ids.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int len = lens[static_cast<std::size_t>(i)];
        out.inputs.block(static_cast<Eigen::Index>(i) * max_len, 0, len, out.d_in) =
            rows[static_cast<std::size_t>(i)].cast<float>();
        for (int j = 0; j < len; ++j)
            out.mask[static_cast<std::size_t>(i) * static_cast<std::size_t>(max_len) +
                     static_cast<std::size_t>(j)] = 1;
        out.labels[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(i)];
        out.sample_ids[static_cast<std::size_t>(i)] = id_offset + static_cast<std::uint64_t>(i);
    }
    return out;
}

}  // namespace detail

inline TaskSequence generate_task_sequence(const TaskGenConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const int k = cfg.num_classes;
    const int n_conflict =
        static_cast<int>(std::ceil(cfg.interference.conflict_fraction * k - 1e-12));

    Rng shared_rng(derive_seed(seed, detail::kTagSharedBasis));
    const MatD q_shared = detail::random_orthogonal(cfg.d_in, shared_rng);

    TaskSequence seq;
    seq.reserve(static_cast<std::size_t>(cfg.num_tasks));
    for (int t = 1; t <= cfg.num_tasks; ++t) {
        TaskSpec spec;
        spec.task_id = t;
        spec.num_classes = k;
        spec.noise_sigma = static_cast<float>(cfg.noise_sigma);
        spec.seq_len_min = cfg.seq_len_min;
        spec.seq_len_max = cfg.seq_len_max;
        spec.epochs = cfg.epochs_per_task.empty()
                          ? 1
                          : cfg.epochs_per_task[static_cast<std::size_t>(t - 1)];
        spec.train_size = cfg.train_size;
        spec.test_size = cfg.test_size;

        Rng basis_rng(derive_seed(seed, detail::kTagTaskBasis + static_cast<std::uint64_t>(t)));
        const MatD q_rand = detail::random_orthogonal(cfg.d_in, basis_rng);
        const double kappa = cfg.interference.kappa;
        spec.mixing_basis =
            detail::orthonormalize((1.0 - kappa) * q_shared + kappa * q_rand).cast<float>();

        Rng proto_rng(derive_seed(seed, detail::kTagPrototypes + static_cast<std::uint64_t>(t)));
        MatD protos(k, cfg.d_in);
        proto_rng.fill_normal(protos);
        spec.class_prototypes = protos.cast<float>();

        if (t > 1 && n_conflict > 0) {
            // Copy n_conflict prototypes from the previous task under new labels.
            Rng conf_rng(derive_seed(seed, detail::kTagConflict + static_cast<std::uint64_t>(t)));
            std::vector<int> src = conf_rng.permutation(k);
            src.resize(static_cast<std::size_t>(n_conflict));
            std::vector<int> dst = conf_rng.permutation(k);
            dst.resize(static_cast<std::size_t>(n_conflict));
            for (int i = 0; i < n_conflict; ++i) {
                if (dst[static_cast<std::size_t>(i)] != src[static_cast<std::size_t>(i)]) continue;
                bool fixed = false;
                for (int j = 0; j < n_conflict && !fixed; ++j) {
                    if (j == i) continue;
                    if (dst[static_cast<std::size_t>(j)] != src[static_cast<std::size_t>(i)] &&
                        dst[static_cast<std::size_t>(i)] != src[static_cast<std::size_t>(j)]) {
                        std::swap(dst[static_cast<std::size_t>(i)], dst[static_cast<std::size_t>(j)]);
                        fixed = true;
                    }
                }
                if (!fixed) {  // swap in a slot outside the chosen set
                    for (int u = 0; u < k && !fixed; ++u) {
                        if (u == src[static_cast<std::size_t>(i)]) continue;
                        if (std::find(dst.begin(), dst.end(), u) == dst.end()) {
                            dst[static_cast<std::size_t>(i)] = u;
                            fixed = true;
                        }
                    }
                }
            }
            const MatF& prev = seq.back().spec.class_prototypes;
            for (int i = 0; i < n_conflict; ++i)
                spec.class_prototypes.row(dst[static_cast<std::size_t>(i)]) =
                    prev.row(src[static_cast<std::size_t>(i)]);
        }

        TaskData data;
        data.spec = spec;
        Rng train_rng(derive_seed(seed, detail::kTagTrainStream + static_cast<std::uint64_t>(t)));
        data.train = detail::materialize_stream(spec, cfg.train_size, 0, train_rng);
        Rng test_rng(derive_seed(seed, detail::kTagTestStream + static_cast<std::uint64_t>(t)));
        data.test = detail::materialize_stream(spec, cfg.test_size,
                                               static_cast<std::uint64_t>(cfg.train_size), test_rng);
        seq.push_back(std::move(data));
    }
    return seq;
}

// Diverse-input corpus for SAE training: up to `samples_per_source` samples
// from every task's training stream plus `extra_sources` held-out random
// distributions, shuffled.
inline SampleBatch generate_sae_corpus(const TaskSequence& seq, int extra_sources,
                                       int samples_per_source, std::uint64_t seed) {
    if (seq.empty()) throw config_error("sae.corpus: task sequence is empty");
    if (extra_sources < 0) throw config_error("sae.corpus.extra_sources must be >= 0");
    if (samples_per_source < 1) throw config_error("sae.corpus.samples_per_source must be >= 1");

    const int d_in = seq.front().spec.class_prototypes.cols();
    std::vector<const SampleBatch*> sources;
    std::vector<std::vector<int>> picks;
    std::vector<SampleBatch> extra;

    for (const auto& task : seq) {
        const int cap = std::min(samples_per_source, task.train.batch);
        Rng pick_rng(derive_seed(seed, detail::kTagCorpusPick +
                                           static_cast<std::uint64_t>(task.spec.task_id)));
        std::vector<int> idx = pick_rng.permutation(task.train.batch);
        idx.resize(static_cast<std::size_t>(cap));
        sources.push_back(&task.train);
        picks.push_back(std::move(idx));
    }
    const TaskSpec& base = seq.front().spec;
    for (int s = 0; s < extra_sources; ++s) {
        Rng src_rng(derive_seed(seed, detail::kTagCorpusExtra + static_cast<std::uint64_t>(s)));
        TaskSpec spec;
        spec.task_id = -(s + 1);
        spec.num_classes = base.num_classes;
        spec.noise_sigma = base.noise_sigma;
        spec.seq_len_min = base.seq_len_min;
        spec.seq_len_max = base.seq_len_max;
        spec.mixing_basis = detail::random_orthogonal(d_in, src_rng).cast<float>();
        MatD protos(base.num_classes, d_in);
        src_rng.fill_normal(protos);
        spec.class_prototypes = protos.cast<float>();
        extra.push_back(detail::materialize_stream(spec, samples_per_source, 0, src_rng));
    }
    for (auto& e : extra) {
        picks.emplace_back();
        for (int i = 0; i < e.batch; ++i) picks.back().push_back(i);
        sources.push_back(&e);
    }

    // Flatten (source, index) pairs and shuffle once.
    std::vector<std::pair<int, int>> order;
    for (std::size_t s = 0; s < sources.size(); ++s)
        for (int i : picks[s]) order.emplace_back(static_cast<int>(s), i);
    Rng shuffle_rng(derive_seed(seed, detail::kTagCorpusShuffle));
    shuffle_rng.shuffle(order.begin(), order.end());

    int max_len = 1;
    for (const auto& [s, i] : order)
        max_len = std::max(max_len, sources[static_cast<std::size_t>(s)]->length(i));

    SampleBatch out;
    out.batch = static_cast<int>(order.size());
    out.max_len = max_len;
    out.d_in = d_in;
    out.inputs = MatF::Zero(static_cast<Eigen::Index>(out.batch) * max_len, d_in);
    out.mask.assign(static_cast<std::size_t>(out.batch) * static_cast<std::size_t>(max_len), 0);
    out.labels.resize(order.size());
    out.sample_ids.resize(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        const auto& [s, i] = order[r];
        const SampleBatch& src = *sources[static_cast<std::size_t>(s)];
        const int len = src.length(i);
        out.inputs.block(static_cast<Eigen::Index>(r) * max_len, 0, len, d_in) =
            src.inputs.block(static_cast<Eigen::Index>(i) * src.max_len, 0, len, d_in);
        for (int j = 0; j < len; ++j)
            out.mask[r * static_cast<std::size_t>(max_len) + static_cast<std::size_t>(j)] = 1;
        out.labels[r] = src.labels[static_cast<std::size_t>(i)];
        out.sample_ids[r] = static_cast<std::uint64_t>(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// "SFDD" dataset files: the anchor container framing applied to generated
// data. Task files carry the TaskSpec plus train and test streams; corpus
// files carry one stream.

inline constexpr std::uint16_t kSfddVersion = 1;

namespace detail {

inline void write_stream(BinaryWriter& w, const SampleBatch& b) {
    w.u64(static_cast<std::uint64_t>(b.batch));
    for (int i = 0; i < b.batch; ++i) {
        const int len = b.length(i);
        w.u64(b.sample_ids[static_cast<std::size_t>(i)]);
        w.u32(static_cast<std::uint32_t>(b.labels[static_cast<std::size_t>(i)]));
        w.u32(static_cast<std::uint32_t>(len));
        for (int j = 0; j < len; ++j) w.u8(1);
        for (int j = 0; j < len; ++j)
            w.f32_array(b.inputs.row(static_cast<Eigen::Index>(i) * b.max_len + j).data(),
                        static_cast<std::size_t>(b.d_in));
    }
}

inline SampleBatch read_stream(BinaryReader& r, int d_in) {
    const std::uint64_t count = r.u64();
    struct Rec {
        std::uint64_t id;
        int label, len;
        std::vector<std::uint8_t> mask;
        MatF rows;
    };
    std::vector<Rec> recs;
    recs.reserve(count);
    int max_len = 1;
    for (std::uint64_t i = 0; i < count; ++i) {
        Rec rec;
        rec.id = r.u64();
        rec.label = static_cast<int>(r.u32());
        rec.len = static_cast<int>(r.u32());
        if (rec.len < 1) r.fail("sample with non-positive length");
        rec.mask.resize(static_cast<std::size_t>(rec.len));
        r.bytes(rec.mask.data(), rec.mask.size());
        rec.rows.resize(rec.len, d_in);
        r.f32_array(rec.rows.data(), static_cast<std::size_t>(rec.len) * d_in);
        max_len = std::max(max_len, rec.len);
        recs.push_back(std::move(rec));
    }
    SampleBatch out;
    out.batch = static_cast<int>(count);
    out.max_len = max_len;
    out.d_in = d_in;
    out.inputs = MatF::Zero(static_cast<Eigen::Index>(out.batch) * max_len, d_in);
    out.mask.assign(static_cast<std::size_t>(out.batch) * static_cast<std::size_t>(max_len), 0);
    out.labels.resize(count);
    out.sample_ids.resize(count);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const Rec& rec = recs[i];
        out.inputs.block(static_cast<Eigen::Index>(i) * max_len, 0, rec.len, d_in) = rec.rows;
        for (int j = 0; j < rec.len; ++j)
            out.mask[i * static_cast<std::size_t>(max_len) + static_cast<std::size_t>(j)] =
                rec.mask[static_cast<std::size_t>(j)];
        out.labels[i] = rec.label;
        out.sample_ids[i] = rec.id;
    }
    return out;
}

}  // namespace detail

inline void save_task_file(const std::string& path, const TaskData& task) {
    BinaryWriter w(path);
    w.bytes("SFDD", 4);
    w.u16(kSfddVersion);
    w.u8(1);  // task file
    w.u32(static_cast<std::uint32_t>(task.spec.class_prototypes.cols()));
    w.u32(static_cast<std::uint32_t>(task.spec.num_classes));
    w.u32(static_cast<std::uint32_t>(task.spec.task_id));
    w.f32(task.spec.noise_sigma);
    w.u32(static_cast<std::uint32_t>(task.spec.seq_len_min));
    w.u32(static_cast<std::uint32_t>(task.spec.seq_len_max));
    w.u32(static_cast<std::uint32_t>(task.spec.epochs));
    w.f32_array(task.spec.class_prototypes.data(),
                static_cast<std::size_t>(task.spec.class_prototypes.size()));
    w.f32_array(task.spec.mixing_basis.data(),
                static_cast<std::size_t>(task.spec.mixing_basis.size()));
    detail::write_stream(w, task.train);
    detail::write_stream(w, task.test);
    w.close();
}

inline TaskData load_task_file(const std::string& path) {
    BinaryReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "SFDD") r.fail("bad magic");
    if (r.u16() != kSfddVersion) r.fail("unsupported version");
    if (r.u8() != 1) r.fail("not a task file");
    TaskData task;
    const int d_in = static_cast<int>(r.u32());
    task.spec.num_classes = static_cast<int>(r.u32());
    task.spec.task_id = static_cast<int>(r.u32());
    task.spec.noise_sigma = r.f32();
    task.spec.seq_len_min = static_cast<int>(r.u32());
    task.spec.seq_len_max = static_cast<int>(r.u32());
    task.spec.epochs = static_cast<int>(r.u32());
    task.spec.class_prototypes.resize(task.spec.num_classes, d_in);
    r.f32_array(task.spec.class_prototypes.data(),
                static_cast<std::size_t>(task.spec.class_prototypes.size()));
    task.spec.mixing_basis.resize(d_in, d_in);
    r.f32_array(task.spec.mixing_basis.data(),
                static_cast<std::size_t>(task.spec.mixing_basis.size()));
    task.train = detail::read_stream(r, d_in);
    task.test = detail::read_stream(r, d_in);
    task.spec.train_size = task.train.batch;
    task.spec.test_size = task.test.batch;
    r.expect_eof();
    return task;
}

inline void save_corpus_file(const std::string& path, const SampleBatch& corpus) {
    BinaryWriter w(path);
    w.bytes("SFDD", 4);
    w.u16(kSfddVersion);
    w.u8(2);  // corpus file
    w.u32(static_cast<std::uint32_t>(corpus.d_in));
    w.u32(0);
    detail::write_stream(w, corpus);
    w.close();
}

inline SampleBatch load_corpus_file(const std::string& path) {
    BinaryReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "SFDD") r.fail("bad magic");
    if (r.u16() != kSfddVersion) r.fail("unsupported version");
    if (r.u8() != 2) r.fail("not a corpus file");
    const int d_in = static_cast<int>(r.u32());
    r.u32();
    SampleBatch out = detail::read_stream(r, d_in);
    r.expect_eof();
    return out;
}

}  // namespace saefd

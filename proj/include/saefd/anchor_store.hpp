#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "saefd/common.hpp"
#include "saefd/half.hpp"
#include "saefd/io.hpp"
#include "saefd/rng.hpp"
#include "saefd/synth_tasks.hpp"
#include "saefd/toy_model.hpp"

// Anchor snapshots: after a task finishes training, the per-token activations
// of N_a of its training samples are captured under the current adapter and
// stored as binary16 (round-to-nearest-even), together with the inputs and
// mask. The buffer accumulates across tasks and is sampled uniformly over
// records during distillation.

namespace saefd {

struct AnchorRecord {
    std::uint32_t task_id = 0;
    std::uint64_t sample_id = 0;
    int len = 0;                           // real tokens only; padding is trimmed
    MatF inputs;                           // len x d_in, float32
    std::vector<std::uint8_t> mask;        // len entries
    std::vector<std::uint16_t> activations;  // len * d, binary16 payload

    std::uint64_t activation_digest() const {
        return fnv1a64(activations.data(), activations.size() * sizeof(std::uint16_t));
    }
};

class AnchorBuffer {
public:
    void append(std::vector<AnchorRecord> records) {
        if (records.empty()) return;
        const std::uint32_t task = records.front().task_id;
        for (const auto& r : records)
            if (r.task_id != task)
                throw usage_error("AnchorBuffer::append: records span multiple tasks");
        if (per_task_counts_.count(task))
            throw usage_error("AnchorBuffer::append: task " + std::to_string(task) +
                              " already present");
        per_task_counts_[task] = records.size();
        for (auto& r : records) records_.push_back(std::move(r));
    }

    bool empty() const { return records_.empty(); }
    std::size_t size() const { return records_.size(); }
    const std::vector<AnchorRecord>& records() const { return records_; }
    const std::map<std::uint32_t, std::size_t>& per_task_counts() const {
        return per_task_counts_;
    }

    // batch_size i.i.d. uniform draws over all records, with replacement.
    std::vector<const AnchorRecord*> sample_batch(int batch_size, Rng& rng) const {
        if (records_.empty()) throw usage_error("AnchorBuffer::sample_batch: buffer is empty");
        std::vector<const AnchorRecord*> out;
        out.reserve(static_cast<std::size_t>(batch_size));
        for (int i = 0; i < batch_size; ++i)
            out.push_back(&records_[rng.below(records_.size())]);
        return out;
    }

    void save(const std::string& path) const {
        BinaryWriter w(path);
        w.bytes("SFDA", 4);
        w.u16(kVersion);
        w.u32(static_cast<std::uint32_t>(d_in_));
        w.u32(static_cast<std::uint32_t>(d_));
        w.u64(records_.size());
        for (const auto& r : records_) {
            w.u32(r.task_id);
            w.u64(r.sample_id);
            w.u32(static_cast<std::uint32_t>(r.len));
            w.bytes(r.mask.data(), r.mask.size());
            w.f32_array(r.inputs.data(), static_cast<std::size_t>(r.inputs.size()));
            w.u16_array(r.activations.data(), r.activations.size());
        }
        w.close();
    }

    static AnchorBuffer load(const std::string& path) {
        BinaryReader r(path);
        char magic[4];
        r.bytes(magic, 4);
        if (std::string(magic, 4) != "SFDA") r.fail("bad magic");
        const std::uint16_t version = r.u16();
        if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
        AnchorBuffer buf;
        buf.d_in_ = static_cast<int>(r.u32());
        buf.d_ = static_cast<int>(r.u32());
        const std::uint64_t count = r.u64();
        for (std::uint64_t i = 0; i < count; ++i) {
            AnchorRecord rec;
            rec.task_id = r.u32();
            rec.sample_id = r.u64();
            rec.len = static_cast<int>(r.u32());
            if (rec.len < 1) r.fail("anchor record with non-positive length");
            rec.mask.resize(static_cast<std::size_t>(rec.len));
            r.bytes(rec.mask.data(), rec.mask.size());
            rec.inputs.resize(rec.len, buf.d_in_);
            r.f32_array(rec.inputs.data(), static_cast<std::size_t>(rec.inputs.size()));
            rec.activations.resize(static_cast<std::size_t>(rec.len) *
                                   static_cast<std::size_t>(buf.d_));
            r.u16_array(rec.activations.data(), rec.activations.size());
            buf.per_task_counts_[rec.task_id] += 1;
            buf.records_.push_back(std::move(rec));
        }
        r.expect_eof();
        return buf;
    }

    void set_dims(int d_in, int d) {
        d_in_ = d_in;
        d_ = d;
    }
    int d_in() const { return d_in_; }
    int d() const { return d_; }

    // Payload size per the storage-bound formula: per record
    // 2*L*d + 4*L*d_in + L mask bytes.
    std::size_t payload_bytes() const {
        std::size_t total = 0;
        for (const auto& r : records_)
            total += 2u * r.activations.size() + 4u * static_cast<std::size_t>(r.inputs.size()) +
                     r.mask.size();
        return total;
    }

private:
    static constexpr std::uint16_t kVersion = 1;
    std::vector<AnchorRecord> records_;
    std::map<std::uint32_t, std::size_t> per_task_counts_;
    int d_in_ = 0, d_ = 0;
};

// Select N_a training samples by seeded shuffle, run the current model on
// them without gradient state, round activations to binary16.
template <typename T>
std::vector<AnchorRecord> capture_anchors(const BaseModel<T>& model, const LoraAdapter<T>& adapter,
                                          const TaskData& task, int n_a, std::uint64_t seed) {
    if (n_a < 1 || n_a > task.train.batch)
        throw usage_error("capture_anchors: N_a=" + std::to_string(n_a) +
                          " outside [1, " + std::to_string(task.train.batch) + "]");
    Rng rng(derive_seed(seed, 0xa2c8 + static_cast<std::uint64_t>(task.spec.task_id)));
    std::vector<int> idx = rng.permutation(task.train.batch);
    idx.resize(static_cast<std::size_t>(n_a));

    const SampleBatch sel = task.train.subset(idx);
    const auto packed = PackedBatch<T>::from(sel);
    const Mat<T> acts = collect_activations(model, adapter, packed);

    std::vector<AnchorRecord> out;
    out.reserve(static_cast<std::size_t>(n_a));
    for (int i = 0; i < sel.batch; ++i) {
        const int lo = packed.offsets[static_cast<std::size_t>(i)];
        const int len = packed.offsets[static_cast<std::size_t>(i) + 1] - lo;
        AnchorRecord rec;
        rec.task_id = static_cast<std::uint32_t>(task.spec.task_id);
        rec.sample_id = sel.sample_ids[static_cast<std::size_t>(i)];
        rec.len = len;
        rec.inputs = packed.tokens.block(lo, 0, len, packed.tokens.cols()).template cast<float>();
        rec.mask.assign(static_cast<std::size_t>(len), 1);
        const MatF a32 = acts.block(lo, 0, len, acts.cols()).template cast<float>();
        rec.activations = to_half(a32);
        out.push_back(std::move(rec));
    }
    return out;
}

// Assemble a sampled anchor batch into packed form: inputs for the current
// forward pass and stored activations upcast from binary16.
template <typename T>
struct AnchorBatch {
    Mat<T> tokens;        // N x d_in
    Mat<T> activations;   // N x d (upcast)
    std::vector<int> seg;
    int batch = 0;
};

template <typename T>
AnchorBatch<T> make_anchor_batch(const std::vector<const AnchorRecord*>& recs, int d) {
    AnchorBatch<T> out;
    out.batch = static_cast<int>(recs.size());
    int n = 0;
    for (const auto* r : recs) n += r->len;
    if (n == 0) throw usage_error("make_anchor_batch: empty records");
    out.tokens.resize(n, recs.front()->inputs.cols());
    out.activations.resize(n, d);
    out.seg.resize(static_cast<std::size_t>(n));
    int row = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const AnchorRecord& r = *recs[i];
        const MatF acts = from_half(r.activations, r.len, d);
        for (int j = 0; j < r.len; ++j) {
            out.tokens.row(row) = r.inputs.row(j).template cast<T>();
            out.activations.row(row) = acts.row(j).template cast<T>();
            out.seg[static_cast<std::size_t>(row)] = static_cast<int>(i);
            ++row;
        }
    }
    return out;
}

}  // namespace saefd

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "saefd/anchor_store.hpp"
#include "saefd/synth_tasks.hpp"
#include "saefd/toy_model.hpp"

using namespace saefd;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    TaskSequence seq;
    BaseModel<float> model;
    LoraAdapter<float> adapter;

    Fixture() {
        TaskGenConfig cfg;
        cfg.num_tasks = 2;
        cfg.num_classes = 3;
        cfg.d_in = 6;
        cfg.seq_len_min = 2;
        cfg.seq_len_max = 5;
        cfg.train_size = 30;
        cfg.test_size = 10;
        seq = generate_task_sequence(cfg, 17);
        model = BaseModel<float>::init(6, 10, 4, 3);
        adapter = LoraAdapter<float>::init(model, 2, 8.f, 0.f, 5);
    }
};

std::vector<AnchorRecord> fake_records(std::uint32_t task, int count, int d_in, int d,
                                       std::uint64_t seed) {
    Rng rng(seed);
    std::vector<AnchorRecord> out;
    for (int i = 0; i < count; ++i) {
        AnchorRecord r;
        r.task_id = task;
        r.sample_id = static_cast<std::uint64_t>(i);
        r.len = 1 + static_cast<int>(rng.below(4));
        r.inputs.resize(r.len, d_in);
        for (Eigen::Index a = 0; a < r.inputs.size(); ++a)
            r.inputs.data()[a] = static_cast<float>(rng.normal());
        r.mask.assign(static_cast<std::size_t>(r.len), 1);
        MatF acts(r.len, d);
        for (Eigen::Index a = 0; a < acts.size(); ++a)
            acts.data()[a] = static_cast<float>(rng.normal());
        r.activations = to_half(acts);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace

TEST_CASE("capture is deterministic down to binary16 bit patterns") {
    Fixture fx;
    const auto a = capture_anchors(fx.model, fx.adapter, fx.seq[0], 8, 42);
    const auto b = capture_anchors(fx.model, fx.adapter, fx.seq[0], 8, 42);
    REQUIRE(a.size() == 8);
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].sample_id == b[i].sample_id);
        REQUIRE(a[i].activations == b[i].activations);
        REQUIRE(a[i].activation_digest() == b[i].activation_digest());
        REQUIRE(a[i].task_id == 1);
    }
    const auto c = capture_anchors(fx.model, fx.adapter, fx.seq[0], 8, 43);
    bool same_selection = true;
    for (std::size_t i = 0; i < a.size(); ++i)
        same_selection = same_selection && a[i].sample_id == c[i].sample_id;
    REQUIRE_FALSE(same_selection);

    REQUIRE_THROWS_AS(capture_anchors(fx.model, fx.adapter, fx.seq[0], 31, 42), usage_error);
    REQUIRE_THROWS_AS(capture_anchors(fx.model, fx.adapter, fx.seq[0], 0, 42), usage_error);
}

TEST_CASE("stored binary16 matches the round-to-nearest-even oracle") {
    // a record whose activation is exactly 1/3 must store 0.333251953125
    Fixture fx;
    auto recs = capture_anchors(fx.model, fx.adapter, fx.seq[0], 2, 1);
    recs[0].activations = to_half(MatF::Constant(recs[0].len, fx.model.d, 1.0f / 3.0f));
    for (auto h : recs[0].activations) REQUIRE(half_to_float(h) == 0.333251953125f);
}

TEST_CASE("buffer append rules") {
    AnchorBuffer buf;
    buf.set_dims(6, 10);
    REQUIRE(buf.empty());
    buf.append(fake_records(1, 5, 6, 10, 1));
    buf.append(fake_records(2, 5, 6, 10, 2));
    REQUIRE(buf.size() == 10);
    REQUIRE(buf.per_task_counts().at(1) == 5);
    REQUIRE(buf.per_task_counts().at(2) == 5);

    buf.append({});  // no-op
    REQUIRE(buf.size() == 10);

    REQUIRE_THROWS_AS(buf.append(fake_records(1, 3, 6, 10, 3)), usage_error);  // duplicate task
}

TEST_CASE("uniform sampling over records") {
    AnchorBuffer buf;
    buf.set_dims(4, 8);
    buf.append(fake_records(1, 1, 4, 8, 7));
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        const auto batch = buf.sample_batch(3, rng);
        for (const auto* r : batch) REQUIRE(r == &buf.records()[0]);
    }

    AnchorBuffer two;
    two.set_dims(4, 8);
    two.append(fake_records(1, 50, 4, 8, 11));
    two.append(fake_records(2, 50, 4, 8, 12));
    Rng rng2(99);
    int task1 = 0;
    const int draws = 10000;
    for (const auto* r : two.sample_batch(draws, rng2)) task1 += (r->task_id == 1) ? 1 : 0;
    // chi-squared against the uniform null, 1 dof, alpha = 0.01 -> 6.635
    const double expect = draws / 2.0;
    const double chi2 = (task1 - expect) * (task1 - expect) / expect +
                        (draws - task1 - expect) * (draws - task1 - expect) / expect;
    REQUIRE(chi2 < 6.635);

    Rng r1(3), r2(3);
    const auto s1 = two.sample_batch(32, r1);
    const auto s2 = two.sample_batch(32, r2);
    REQUIRE(s1 == s2);  // same RNG stream, same records

    AnchorBuffer empty;
    Rng r3(0);
    REQUIRE_THROWS_AS(empty.sample_batch(4, r3), usage_error);
}

TEST_CASE("anchor files round-trip byte-identically") {
    AnchorBuffer buf;
    buf.set_dims(6, 10);
    buf.append(fake_records(1, 7, 6, 10, 21));
    buf.append(fake_records(2, 4, 6, 10, 22));

    const std::string p1 = (fs::temp_directory_path() / "saefd_anchors1.sfda").string();
    const std::string p2 = (fs::temp_directory_path() / "saefd_anchors2.sfda").string();
    buf.save(p1);
    AnchorBuffer loaded = AnchorBuffer::load(p1);
    REQUIRE(loaded.size() == 11);
    REQUIRE(loaded.per_task_counts().at(1) == 7);
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        REQUIRE(loaded.records()[i].activations == buf.records()[i].activations);
        REQUIRE(loaded.records()[i].inputs == buf.records()[i].inputs);
    }
    loaded.save(p2);
    REQUIRE(file_checksum(p1) == file_checksum(p2));

    // empty buffer round-trips
    AnchorBuffer empty;
    empty.set_dims(6, 10);
    const std::string pe = (fs::temp_directory_path() / "saefd_anchors_empty.sfda").string();
    empty.save(pe);
    REQUIRE(AnchorBuffer::load(pe).empty());

    // truncation: format error, nothing returned
    fs::resize_file(p1, fs::file_size(p1) - 7);
    try {
        AnchorBuffer::load(p1);
        FAIL("expected format_error");
    } catch (const format_error& e) {
        REQUIRE(std::string(e.what()).find("offset") != std::string::npos);
    }

    // corrupt magic
    {
        std::fstream io(p2, std::ios::in | std::ios::out | std::ios::binary);
        io.write("NOPE", 4);
    }
    REQUIRE_THROWS_AS(AnchorBuffer::load(p2), format_error);

    fs::remove(p1);
    fs::remove(p2);
    fs::remove(pe);
}

TEST_CASE("file size tracks the payload formula within 5%") {
    AnchorBuffer buf;
    buf.set_dims(32, 64);
    buf.append(fake_records(1, 200, 32, 64, 31));
    const std::string p = (fs::temp_directory_path() / "saefd_anchors_size.sfda").string();
    buf.save(p);
    const auto actual = static_cast<double>(fs::file_size(p));
    const auto formula = static_cast<double>(buf.payload_bytes());
    REQUIRE(actual / formula < 1.05);
    REQUIRE(actual / formula > 0.95);
    fs::remove(p);
}

TEST_CASE("anchor batches upcast binary16 payloads exactly") {
    AnchorBuffer buf;
    buf.set_dims(4, 8);
    buf.append(fake_records(1, 6, 4, 8, 41));
    Rng rng(1);
    const auto recs = buf.sample_batch(4, rng);
    const auto ab = make_anchor_batch<float>(recs, 8);
    REQUIRE(ab.batch == 4);
    int row = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const MatF expect = from_half(recs[i]->activations, recs[i]->len, 8);
        for (int j = 0; j < recs[i]->len; ++j, ++row) {
            REQUIRE(ab.activations.row(row) == expect.row(j));
            REQUIRE(ab.seg[static_cast<std::size_t>(row)] == static_cast<int>(i));
        }
    }
    REQUIRE(row == ab.tokens.rows());
}

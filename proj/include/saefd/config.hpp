#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "saefd/cl_trainer.hpp"
#include "saefd/common.hpp"
#include "saefd/gated_sae.hpp"
#include "saefd/synth_tasks.hpp"

// Nested key-value configuration with fail-closed parsing: every key must
// exist in the defaults tree, and value kinds must match. Defaults are the
// desk-scale working point; optimizer/SAE/lambda settings keep their
// published values.

namespace saefd {

using json = nlohmann::json;

inline json default_config() {
    return json{
        {"data",
         {{"seed", 1234},
          {"T", 4},
          {"num_classes", 5},
          {"d_in", 32},
          {"seq_len_min", 4},
          {"seq_len_max", 12},
          {"train_size", 2000},
          {"test_size", 500},
          {"noise_sigma", 0.5},
          {"kappa", 0.2},
          {"conflict_fraction", 0.6}}},
        {"model",
         {{"seed", 777},
          {"d", 64},
          {"k_max", 16},
          {"lora_rank", 8},
          {"lora_alpha", 32.0},
          {"lora_dropout", 0.1}}},
        {"sae",
         {{"expansion_factor", 8},
          {"l1_coeff", 1e-3},
          {"lr", 3e-4},
          {"epochs", 30},
          {"batch_size", 128},
          {"holdout_fraction", 0.1},
          {"extra_sources", 2},
          {"samples_per_source", 2000}}},
        {"train",
         {{"mode", "saefd"},
          {"lr", 1e-4},
          {"batch_size", 32},
          {"grad_accum", 1},
          {"epochs_per_task", json::array({3, 2, 4, 2})},
          {"warmup_frac", 0.1},
          {"weight_decay", 0.0},
          {"anchors_per_task", 200},
          {"anchor_batch_size", 0},
          {"rho", 0.15},
          {"ema_alpha", 0.05},
          {"lambda_min", 0.2},
          {"lambda_max", 10.0},
          {"fixed_lambda", 1.0},
          {"threshold_frac", 0.1},
          {"probe_samples", 500},
          {"probe_seed", 99}}},
        {"paths",
         {{"data_dir", "data"},
          {"sae_checkpoint", "sae/sae.sfdm"},
          {"anchor_dir", ""},
          {"output_dir", "out"}}},
        {"ablate",
         {{"modes", json::array({"saefd"})},
          {"anchors_per_task", json::array()},
          {"rho", json::array()},
          {"seeds", json::array()}}},
    };
}

namespace detail {

inline bool kind_compatible(const json& def, const json& user) {
    if (def.is_number() && user.is_number()) return true;
    if (def.is_string() && user.is_string()) return true;
    if (def.is_array() && user.is_array()) return true;
    if (def.is_object() && user.is_object()) return true;
    if (def.is_boolean() && user.is_boolean()) return true;
    return false;
}

inline void merge_into(json& base, const json& user, const std::string& prefix) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw config_error("unknown config key: " + path);
        json& slot = base[it.key()];
        if (!kind_compatible(slot, it.value()))
            throw config_error("config key " + path + " has the wrong type");
        if (slot.is_object())
            merge_into(slot, it.value(), path);
        else
            slot = it.value();
    }
}

}  // namespace detail

inline json load_config(const std::string& path) {
    json cfg = default_config();
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    json user;
    try {
        user = json::parse(in);
    } catch (const json::parse_error& e) {
        throw config_error("config parse error in " + path + ": " + e.what());
    }
    if (!user.is_object()) throw config_error("config root must be an object: " + path);
    detail::merge_into(cfg, user, "");
    return cfg;
}

// --set a.b.c=value (value parsed as JSON, falling back to a string literal).
inline void apply_override(json& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw config_error("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);

    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        parts.push_back(key.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json* slot = &cfg;
    std::string walked;
    for (const auto& p : parts) {
        walked = walked.empty() ? p : walked + "." + p;
        if (!slot->is_object() || !slot->contains(p))
            throw config_error("unknown config key: " + walked);
        slot = &(*slot)[p];
    }
    json parsed;
    try {
        parsed = json::parse(val);
    } catch (const json::parse_error&) {
        parsed = val;  // bare string
    }
    if (!detail::kind_compatible(*slot, parsed))
        throw config_error("config key " + key + " has the wrong type");
    if (slot->is_object()) throw config_error("--set cannot replace the object at " + key);
    *slot = parsed;
}

// Typed view over the merged tree. Field validation happens here and in the
// per-module validate() hooks so errors name the offending key.
struct FullConfig {
    json raw;

    std::uint64_t data_seed = 0;
    std::uint64_t model_seed = 0;
    TaskGenConfig data;
    int model_d = 64, model_k_max = 16;
    int sae_expansion = 8;
    double sae_holdout_fraction = 0.1;
    int sae_extra_sources = 2, sae_samples_per_source = 2000;
    SaeTrainConfig sae;
    RunConfig train;
    std::string data_dir, sae_checkpoint, anchor_dir, output_dir;
    std::vector<std::string> ablate_modes;
    std::vector<int> ablate_anchors;
    std::vector<double> ablate_rho;
    std::vector<std::uint64_t> ablate_seeds;

    static FullConfig from_json(json cfg) {
        FullConfig f;
        f.raw = cfg;
        const json& d = cfg.at("data");
        f.data_seed = d.at("seed").get<std::uint64_t>();
        f.data.num_tasks = d.at("T").get<int>();
        f.data.num_classes = d.at("num_classes").get<int>();
        f.data.d_in = d.at("d_in").get<int>();
        f.data.seq_len_min = d.at("seq_len_min").get<int>();
        f.data.seq_len_max = d.at("seq_len_max").get<int>();
        f.data.train_size = d.at("train_size").get<int>();
        f.data.test_size = d.at("test_size").get<int>();
        f.data.noise_sigma = d.at("noise_sigma").get<double>();
        f.data.interference.kappa = d.at("kappa").get<double>();
        f.data.interference.conflict_fraction = d.at("conflict_fraction").get<double>();

        const json& m = cfg.at("model");
        f.model_seed = m.at("seed").get<std::uint64_t>();
        f.model_d = m.at("d").get<int>();
        f.model_k_max = m.at("k_max").get<int>();

        const json& s = cfg.at("sae");
        f.sae_expansion = s.at("expansion_factor").get<int>();
        f.sae.l1_coeff = s.at("l1_coeff").get<double>();
        f.sae.lr = s.at("lr").get<double>();
        f.sae.epochs = s.at("epochs").get<int>();
        f.sae.batch_size = s.at("batch_size").get<int>();
        f.sae_holdout_fraction = s.at("holdout_fraction").get<double>();
        f.sae_extra_sources = s.at("extra_sources").get<int>();
        f.sae_samples_per_source = s.at("samples_per_source").get<int>();

        const json& t = cfg.at("train");
        f.train.mode = mode_from_name(t.at("mode").get<std::string>());
        f.train.lr = t.at("lr").get<double>();
        f.train.batch_size = t.at("batch_size").get<int>();
        f.train.grad_accum = t.at("grad_accum").get<int>();
        f.data.epochs_per_task = t.at("epochs_per_task").get<std::vector<int>>();
        f.train.warmup_frac = t.at("warmup_frac").get<double>();
        f.train.weight_decay = t.at("weight_decay").get<double>();
        f.train.anchors_per_task = t.at("anchors_per_task").get<int>();
        f.train.anchor_batch_size = t.at("anchor_batch_size").get<int>();
        f.train.lambda.rho = t.at("rho").get<double>();
        f.train.lambda.ema_alpha = t.at("ema_alpha").get<double>();
        f.train.lambda.lambda_min = t.at("lambda_min").get<double>();
        f.train.lambda.lambda_max = t.at("lambda_max").get<double>();
        f.train.fixed_lambda_value = t.at("fixed_lambda").get<double>();
        f.train.threshold_frac = t.at("threshold_frac").get<double>();
        f.train.probe_samples = t.at("probe_samples").get<int>();
        f.train.probe_seed = t.at("probe_seed").get<std::uint64_t>();
        f.train.lora_rank = m.at("lora_rank").get<int>();
        f.train.lora_alpha = m.at("lora_alpha").get<double>();
        f.train.lora_dropout = m.at("lora_dropout").get<double>();

        const json& p = cfg.at("paths");
        f.data_dir = p.at("data_dir").get<std::string>();
        f.sae_checkpoint = p.at("sae_checkpoint").get<std::string>();
        f.anchor_dir = p.at("anchor_dir").get<std::string>();
        f.output_dir = p.at("output_dir").get<std::string>();

        const json& a = cfg.at("ablate");
        f.ablate_modes = a.at("modes").get<std::vector<std::string>>();
        f.ablate_anchors = a.at("anchors_per_task").get<std::vector<int>>();
        f.ablate_rho = a.at("rho").get<std::vector<double>>();
        f.ablate_seeds = a.at("seeds").get<std::vector<std::uint64_t>>();

        f.validate();
        return f;
    }

    void validate() const {
        data.validate();
        sae.validate();
        train.validate();
        if (model_d < 1) throw config_error("model.d must be positive");
        if (model_k_max < data.num_classes)
            throw config_error("model.k_max must be >= data.num_classes");
        if (sae_expansion < 2) throw config_error("sae.expansion_factor must be >= 2");
        if (sae_holdout_fraction <= 0.0 || sae_holdout_fraction >= 1.0)
            throw config_error("sae.holdout_fraction must be in (0, 1)");
        if (sae_extra_sources < 0) throw config_error("sae.extra_sources must be >= 0");
        if (sae_samples_per_source < 1)
            throw config_error("sae.samples_per_source must be >= 1");
        for (const auto& mode : ablate_modes) mode_from_name(mode);  // throws on junk
        for (int na : ablate_anchors)
            if (na < 1) throw config_error("ablate.anchors_per_task entries must be >= 1");
        for (double r : ablate_rho)
            if (r <= 0.0 || r >= 1.0) throw config_error("ablate.rho entries must be in (0, 1)");
    }
};

}  // namespace saefd

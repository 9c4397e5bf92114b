#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "saefd/common.hpp"

// Adaptive distillation weight. The ideal weight makes the distillation term
// contribute a target fraction rho of the total loss:
//   lambda* = rho / (1 - rho) * L_task / L_FD
// and the live weight follows it through a clipped exponential moving
// average. Loss inputs are plain detached numbers; no gradient flows through
// lambda.

namespace saefd {

struct LambdaConfig {
    double rho = 0.15;
    double ema_alpha = 0.05;
    double lambda_min = 0.2;
    double lambda_max = 10.0;

    void validate() const {
        if (rho <= 0.0 || rho >= 1.0) throw config_error("train.rho must be in (0, 1)");
        if (ema_alpha <= 0.0 || ema_alpha > 1.0)
            throw config_error("train.ema_alpha must be in (0, 1]");
        if (lambda_min <= 0.0 || lambda_max < lambda_min)
            throw config_error("train.lambda bounds invalid: need 0 < min <= max");
    }
};

struct LambdaTraceRow {
    std::int64_t step = 0;
    int task_id = 0;
    double lambda = 0.0;
    double l_task = 0.0;
    double l_fd = 0.0;
};

inline double ideal_lambda(double rho, double l_task, double l_fd) {
    if (rho <= 0.0 || rho >= 1.0) throw config_error("ideal_lambda: rho must be in (0, 1)");
    if (l_task < 0.0) throw usage_error("ideal_lambda: task loss must be nonnegative");
    return rho / (1.0 - rho) * l_task / std::max(l_fd, 1e-8);
}

class LambdaController {
public:
    // Adaptive controller; lambda starts at lambda_max the first time
    // distillation is active and carries across task boundaries.
    explicit LambdaController(const LambdaConfig& cfg) : cfg_(cfg), lambda_(cfg.lambda_max) {
        cfg_.validate();
    }

    // Fixed-lambda ablation: update() only logs.
    static LambdaController fixed(double value) {
        LambdaController c;
        c.fixed_ = true;
        c.lambda_ = value;
        return c;
    }

    double value() const { return lambda_; }
    bool is_fixed() const { return fixed_; }

    double update(double l_task, double l_fd, std::int64_t step, int task_id) {
        if (!fixed_) {
            const double clipped =
                std::clamp(ideal_lambda(cfg_.rho, l_task, l_fd), cfg_.lambda_min, cfg_.lambda_max);
            lambda_ = (1.0 - cfg_.ema_alpha) * lambda_ + cfg_.ema_alpha * clipped;
        }
        if (!trace_.empty() && step <= trace_.back().step)
            throw usage_error("LambdaController: trace steps must increase");
        trace_.push_back({step, task_id, lambda_, l_task, l_fd});
        return lambda_;
    }

    const std::vector<LambdaTraceRow>& trace() const { return trace_; }

private:
    LambdaController() = default;
    LambdaConfig cfg_;
    double lambda_ = 0.0;
    bool fixed_ = false;
    std::vector<LambdaTraceRow> trace_;
};

inline void write_lambda_trace_csv(const std::string& path,
                                   const std::vector<LambdaTraceRow>& trace) {
    std::ofstream out(path);
    if (!out) throw format_error("cannot open for writing: " + path);
    out << "step,task_id,lambda,L_task,L_FD\n";
    char line[160];
    for (const auto& row : trace) {
        std::snprintf(line, sizeof(line), "%lld,%d,%.9g,%.9g,%.9g\n",
                      static_cast<long long>(row.step), row.task_id, row.lambda, row.l_task,
                      row.l_fd);
        out << line;
    }
    if (!out) throw format_error("write failed: " + path);
}

}  // namespace saefd

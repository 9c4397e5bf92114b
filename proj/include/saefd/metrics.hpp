#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "saefd/common.hpp"

// Continual-learning aggregates over the lower-triangular accuracy matrix
// a[i][t] = performance on task t after training through task i (fractions
// internally, percentages in every export):
//   AA  = mean_t a[T][t]
//   BWT = mean_{t<T} (a[T][t] - a[t][t])

namespace saefd {

class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(int num_tasks) : rows_(static_cast<std::size_t>(num_tasks)) {}

    int num_tasks() const { return static_cast<int>(rows_.size()); }

    // Row i (1-based) holds accuracies on tasks 1..i after training task i.
    void set_row(int i, std::vector<double> values) {
        if (i < 1 || i > num_tasks()) throw usage_error("AccuracyMatrix: row index out of range");
        if (static_cast<int>(values.size()) != i)
            throw usage_error("AccuracyMatrix: row " + std::to_string(i) + " needs exactly " +
                              std::to_string(i) + " entries");
        for (double v : values)
            if (v < 0.0 || v > 1.0)
                throw usage_error("AccuracyMatrix: entries must be fractions in [0, 1]");
        rows_[static_cast<std::size_t>(i - 1)] = std::move(values);
    }

    double at(int i, int t) const {  // 1-based, t <= i
        if (i < 1 || i > num_tasks() || t < 1 || t > i)
            throw usage_error("AccuracyMatrix: index out of triangle");
        const auto& row = rows_[static_cast<std::size_t>(i - 1)];
        if (static_cast<int>(row.size()) != i)
            throw usage_error("AccuracyMatrix: row " + std::to_string(i) + " missing");
        return row[static_cast<std::size_t>(t - 1)];
    }

    bool row_present(int i) const {
        return static_cast<int>(rows_[static_cast<std::size_t>(i - 1)].size()) == i;
    }

    void to_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw format_error("cannot open for writing: " + path);
        char cell[32];
        for (int i = 1; i <= num_tasks(); ++i) {
            for (int t = 1; t <= i; ++t) {
                std::snprintf(cell, sizeof(cell), "%.2f", at(i, t) * 100.0);
                out << (t > 1 ? "," : "") << cell;
            }
            out << "\n";
        }
        if (!out) throw format_error("write failed: " + path);
    }

    static AccuracyMatrix from_csv(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw format_error("cannot open: " + path);
        std::vector<std::vector<double>> rows;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<double> row;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell) / 100.0);
            if (row.size() != rows.size() + 1)
                throw format_error(path + ": row " + std::to_string(rows.size() + 1) +
                                   " has wrong arity");
            rows.push_back(std::move(row));
        }
        AccuracyMatrix m(static_cast<int>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i)
            m.set_row(static_cast<int>(i + 1), std::move(rows[i]));
        return m;
    }

private:
    std::vector<std::vector<double>> rows_;
};

inline double average_accuracy(const AccuracyMatrix& m) {
    const int t_final = m.num_tasks();
    if (t_final < 1 || !m.row_present(t_final))
        throw usage_error("average_accuracy: final row missing");
    double sum = 0;
    for (int t = 1; t <= t_final; ++t) sum += m.at(t_final, t);
    return sum / t_final;
}

inline std::vector<double> per_task_bwt(const AccuracyMatrix& m) {
    const int t_final = m.num_tasks();
    if (t_final < 2) throw usage_error("per_task_bwt: need at least 2 tasks");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(t_final - 1));
    for (int t = 1; t < t_final; ++t) out.push_back(m.at(t_final, t) - m.at(t, t));
    return out;
}

inline double backward_transfer(const AccuracyMatrix& m) {
    const auto parts = per_task_bwt(m);
    double sum = 0;
    for (double v : parts) sum += v;
    return sum / static_cast<double>(parts.size());
}

}  // namespace saefd

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "rectflow/errors.hpp"

namespace rectflow::io {

using Cell = std::variant<double, std::int64_t, std::string>;

/// Deterministic text rendering of a double: %.17g round-trips bit-exactly and
/// never depends on locale or run order.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// CSV writer with a mandatory header row and '\n' newlines.
class CsvWriter {
  public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
        : out_(path, std::ios::binary) {
        if (!out_) throw ExperimentError("cannot open " + path.string());
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) out_ << ',';
            out_ << header[i];
        }
        out_ << '\n';
    }

    void row(const std::vector<Cell>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            if (const auto* d = std::get_if<double>(&cells[i]))
                out_ << format_double(*d);
            else if (const auto* n = std::get_if<std::int64_t>(&cells[i]))
                out_ << *n;
            else
                out_ << std::get<std::string>(cells[i]);
        }
        out_ << '\n';
        ++rows_;
    }

    std::size_t rows() const { return rows_; }

  private:
    std::ofstream out_;
    std::size_t rows_ = 0;
};

}  // namespace rectflow::io

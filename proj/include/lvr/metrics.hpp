#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "lvr/common.hpp"

namespace lvr {

/// One JSON object per line. Key order is alphabetical (nlohmann's map),
/// so identical values serialize identically.
class MetricsWriter {
  public:
    MetricsWriter() = default;

    explicit MetricsWriter(const std::string& path) : out_(path) {
        if (!out_) throw DataError("cannot open metrics file " + path);
    }

    void step_row(std::size_t step, std::size_t epoch, double loss, double lr, double seconds,
                  const std::string& phase) {
        if (!out_.is_open()) return;
        nlohmann::json row = {{"step", step}, {"epoch", epoch}, {"loss", loss},
                              {"lr", lr},     {"seconds", seconds}, {"phase", phase}};
        out_ << row.dump() << "\n";
        out_.flush();
    }

    void event(const std::string& name, nlohmann::json extra = nlohmann::json::object()) {
        if (!out_.is_open()) return;
        extra["event"] = name;
        out_ << extra.dump() << "\n";
        out_.flush();
    }

  private:
    std::ofstream out_;
};

}  // namespace lvr

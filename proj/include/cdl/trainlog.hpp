#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdl/errors.hpp"
#include "cdl/losses.hpp"

namespace cdl {

// One JSONL record per optimizer step per head, plus schedule events
// (pseudo-label generations, checkpoints). The log doubles as the input
// of the diagnostics command.
class TrainLog {
 public:
  TrainLog() = default;

  explicit TrainLog(const std::filesystem::path& path) {
    file_.emplace(path, std::ios::trunc);
    require(file_->good(), Err::IoError, "cannot open training log " + path.string());
  }

  void step(int cdl_step, int epoch, int step, const char* head, const LossBreakdown& b,
            double mean_s, double lr_encoder, double lr_fc) {
    nlohmann::json j;
    j["event"] = "step";
    j["cdl_step"] = cdl_step;
    j["epoch"] = epoch;
    j["step"] = step;
    j["head"] = head;
    j["rank"] = b.rank;
    j["hinge"] = b.hinge;
    j["ts"] = b.temporal_smoothness;
    j["sp"] = b.sparsity;
    j["ext"] = b.ext;
    j["bce_weighted"] = b.bce_weighted;
    j["cosine_term"] = b.cosine_term;
    j["total"] = b.total;
    j["mean_s"] = mean_s;
    j["lr_encoder"] = lr_encoder;
    j["lr_fc"] = lr_fc;
    emit(j);
  }

  void pseudo_labels(int cdl_step, bool initial, std::size_t videos) {
    nlohmann::json j;
    j["event"] = "pseudo_labels";
    j["cdl_step"] = cdl_step;
    j["initial"] = initial;
    j["videos"] = videos;
    emit(j);
  }

  void checkpoint(int cdl_step, const std::string& path) {
    nlohmann::json j;
    j["event"] = "checkpoint";
    j["cdl_step"] = cdl_step;
    j["path"] = path;
    emit(j);
  }

  const std::vector<std::string>& lines() const { return lines_; }

  static std::vector<nlohmann::json> parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), Err::MissingLogs, "cannot open training log " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      out.push_back(nlohmann::json::parse(line));
    }
    return out;
  }

 private:
  void emit(const nlohmann::json& j) {
    const std::string line = j.dump();
    lines_.push_back(line);
    if (file_) {
      (*file_) << line << '\n';
      file_->flush();
    }
  }

  std::optional<std::ofstream> file_;
  std::vector<std::string> lines_;
};

}  // namespace cdl

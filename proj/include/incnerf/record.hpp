#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "incnerf/errors.hpp"

namespace incnerf::train {

using json = nlohmann::ordered_json;

struct MemoryReport {
  std::string strategy;
  std::size_t aux_bytes = 0;      // everything the strategy keeps beyond the live model
  std::size_t teacher_bytes = 0;
  std::size_t ranges_bytes = 0;
  std::size_t keyframe_bytes = 0;
  std::size_t dataset_bytes = 0;

  json to_json() const {
    json j;
    j["strategy"] = strategy;
    j["aux_bytes"] = aux_bytes;
    j["teacher_bytes"] = teacher_bytes;
    j["ranges_bytes"] = ranges_bytes;
    j["keyframe_bytes"] = keyframe_bytes;
    j["dataset_bytes"] = dataset_bytes;
    return j;
  }

  static MemoryReport from_json(const json& j) {
    MemoryReport m;
    m.strategy = j.at("strategy").get<std::string>();
    m.aux_bytes = j.at("aux_bytes").get<std::size_t>();
    m.teacher_bytes = j.at("teacher_bytes").get<std::size_t>();
    m.ranges_bytes = j.at("ranges_bytes").get<std::size_t>();
    m.keyframe_bytes = j.at("keyframe_bytes").get<std::size_t>();
    m.dataset_bytes = j.at("dataset_bytes").get<std::size_t>();
    return m;
  }
};

struct StepStats {
  int step = 0;
  int sup_iters = 0;
  int dis_iters = 0;
  int dis_skipped = 0;
  int filter_accepted = 0;
  int filter_rejected = 0;
  int filter_fallbacks = 0;
  double beta_thr = 0.0;
  double last_sup_loss = 0.0;
  std::uint64_t model_checksum = 0;
  std::size_t memory_aux_bytes = 0;

  json to_json() const {
    json j;
    j["step"] = step;
    j["sup_iters"] = sup_iters;
    j["dis_iters"] = dis_iters;
    j["dis_skipped"] = dis_skipped;
    j["filter_accepted"] = filter_accepted;
    j["filter_rejected"] = filter_rejected;
    j["filter_fallbacks"] = filter_fallbacks;
    j["beta_thr"] = beta_thr;
    j["last_sup_loss"] = last_sup_loss;
    j["model_checksum"] = model_checksum;
    j["memory_aux_bytes"] = memory_aux_bytes;
    return j;
  }

  static StepStats from_json(const json& j) {
    StepStats s;
    s.step = j.at("step").get<int>();
    s.sup_iters = j.at("sup_iters").get<int>();
    s.dis_iters = j.at("dis_iters").get<int>();
    s.dis_skipped = j.at("dis_skipped").get<int>();
    s.filter_accepted = j.at("filter_accepted").get<int>();
    s.filter_rejected = j.at("filter_rejected").get<int>();
    s.filter_fallbacks = j.at("filter_fallbacks").get<int>();
    s.beta_thr = j.at("beta_thr").get<double>();
    s.last_sup_loss = j.at("last_sup_loss").get<double>();
    s.model_checksum = j.at("model_checksum").get<std::uint64_t>();
    s.memory_aux_bytes = j.at("memory_aux_bytes").get<std::size_t>();
    return s;
  }
};

struct EvalEntry {
  int step = 0;
  double psnr = 0.0;
  double ssim = 0.0;

  json to_json() const {
    json j;
    j["step"] = step;
    j["psnr"] = psnr;
    j["ssim"] = ssim;
    return j;
  }
  static EvalEntry from_json(const json& j) {
    return EvalEntry{j.at("step").get<int>(), j.at("psnr").get<double>(),
                     j.at("ssim").get<double>()};
  }
};

// Everything a run produces apart from checkpoints. Wall-clock timings are
// deliberately kept out (they live in timing.json) so records are
// byte-reproducible under a fixed seed.
struct ExperimentRecord {
  std::string strategy;
  std::uint64_t seed = 0;
  json config_echo;
  std::string dataset_path;
  std::uint32_t dataset_id = 0;
  std::vector<StepStats> steps;
  std::vector<EvalEntry> eval_test;
  double avg_psnr = 0.0;
  double avg_ssim = 0.0;
  MemoryReport memory;

  json to_json() const {
    json j;
    j["strategy"] = strategy;
    j["seed"] = seed;
    j["config"] = config_echo;
    j["dataset_path"] = dataset_path;
    j["dataset_id"] = dataset_id;
    j["steps"] = json::array();
    for (const auto& s : steps) j["steps"].push_back(s.to_json());
    j["eval_test"] = json::array();
    for (const auto& e : eval_test) j["eval_test"].push_back(e.to_json());
    j["avg_psnr"] = avg_psnr;
    j["avg_ssim"] = avg_ssim;
    j["memory"] = memory.to_json();
    return j;
  }

  static ExperimentRecord from_json(const json& j) {
    ExperimentRecord r;
    try {
      r.strategy = j.at("strategy").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.config_echo = j.at("config");
      r.dataset_path = j.at("dataset_path").get<std::string>();
      r.dataset_id = j.at("dataset_id").get<std::uint32_t>();
      for (const auto& s : j.at("steps")) r.steps.push_back(StepStats::from_json(s));
      for (const auto& e : j.at("eval_test")) r.eval_test.push_back(EvalEntry::from_json(e));
      r.avg_psnr = j.at("avg_psnr").get<double>();
      r.avg_ssim = j.at("avg_ssim").get<double>();
      r.memory = MemoryReport::from_json(j.at("memory"));
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed experiment record: ") + e.what());
    }
    return r;
  }
};

}  // namespace incnerf::train

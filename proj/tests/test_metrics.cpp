#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "incnerf/metrics.hpp"
#include "incnerf/report.hpp"
#include "incnerf/rng.hpp"

using namespace incnerf;

namespace {

Image random_image(Rng& rng, int w = 16, int h = 16) {
  Image im = Image::zero(w, h);
  for (auto& v : im.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return im;
}

train::ExperimentRecord fake_record(const std::string& strategy, int steps, double base_psnr,
                                    std::size_t mem_step) {
  train::ExperimentRecord r;
  r.strategy = strategy;
  r.seed = 7;
  r.dataset_path = "ds";
  r.dataset_id = 42;
  r.config_echo = train::json::object();
  for (int s = 0; s < steps; s++) {
    train::StepStats st;
    st.step = s;
    st.memory_aux_bytes = mem_step * static_cast<std::size_t>(s + 1);
    r.steps.push_back(st);
    train::EvalEntry e;
    e.step = s;
    e.psnr = base_psnr + s;
    e.ssim = 0.5 + 0.01 * s;
    r.eval_test.push_back(e);
    r.avg_psnr += e.psnr;
    r.avg_ssim += e.ssim;
  }
  r.avg_psnr /= steps;
  r.avg_ssim /= steps;
  r.memory.strategy = strategy;
  r.memory.aux_bytes = mem_step * static_cast<std::size_t>(steps);
  return r;
}

}  // namespace

TEST_CASE("psnr") {
  Rng rng(1);

  SECTION("identical images cap at 99 dB") {
    auto a = random_image(rng);
    REQUIRE(metrics::psnr(a, a) == 99.0);
  }

  SECTION("known MSE gives the analytic value") {
    Image a = Image::zero(16, 16);
    Image b = Image::zero(16, 16);
    for (auto& v : b.data) v = 0.1f;  // MSE = 0.01
    REQUIRE(metrics::psnr(a, b) == Catch::Approx(20.0).margin(1e-4));
  }

  SECTION("matches a naive double-loop oracle") {
    auto a = random_image(rng);
    auto b = random_image(rng);
    double acc = 0.0;
    for (int r = 0; r < 16; r++) {
      for (int c = 0; c < 16; c++) {
        for (int ch = 0; ch < 3; ch++) {
          const double d = static_cast<double>(a.at(r, c, ch)) - b.at(r, c, ch);
          acc += d * d;
        }
      }
    }
    const double expected = -10.0 * std::log10(acc / (16 * 16 * 3));
    REQUIRE(metrics::psnr(a, b) == Catch::Approx(expected).margin(1e-9));
  }

  SECTION("strictly decreases along a noise ladder") {
    auto base = random_image(rng);
    Rng noise_rng(2);
    double prev = 1e9;
    for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
      Image noisy = base;
      Rng local(noise_rng.next_u64());
      for (auto& v : noisy.data) {
        v = static_cast<float>(v + amp * (local.uniform() - 0.5));
      }
      const double p = metrics::psnr(base, noisy);
      REQUIRE(p < prev);
      prev = p;
    }
  }

  SECTION("shape mismatch is an error") {
    auto a = random_image(rng, 8, 8);
    auto b = random_image(rng, 8, 9);
    REQUIRE_THROWS_AS(metrics::psnr(a, b), UsageError);
  }
}

TEST_CASE("ssim") {
  Rng rng(3);

  SECTION("identical images give 1") {
    auto a = random_image(rng);
    REQUIRE(metrics::ssim(a, a) == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("constant 0 vs constant 1 gives C1/(1+C1)") {
    Image a = Image::zero(16, 16);
    Image b = Image::zero(16, 16);
    for (auto& v : b.data) v = 1.0f;
    const double c1 = 1e-4;
    REQUIRE(metrics::ssim(a, b) == Catch::Approx(c1 / (1.0 + c1)).epsilon(1e-9));
    REQUIRE(metrics::ssim(a, b) == Catch::Approx(9.999e-5).margin(1e-8));
  }

  SECTION("symmetric in its arguments") {
    auto a = random_image(rng);
    auto b = random_image(rng);
    REQUIRE(metrics::ssim(a, b) == Catch::Approx(metrics::ssim(b, a)).margin(1e-15));
  }

  SECTION("clipped affine transform scores below identity") {
    auto a = random_image(rng);
    Image b = a;
    for (auto& v : b.data) v = std::min(1.0f, 0.8f * v + 0.15f);
    REQUIRE(metrics::ssim(a, b) < 1.0);
    REQUIRE(metrics::ssim(a, a) > metrics::ssim(a, b));
  }

  SECTION("images below the window size are rejected") {
    auto a = random_image(rng, 8, 8);
    REQUIRE_THROWS_AS(metrics::ssim(a, a), UsageError);
  }
}

TEST_CASE("report emission") {
  std::vector<train::ExperimentRecord> records{
      fake_record("naive", 4, 15.0, 0),
      fake_record("batch", 4, 24.0, 1000),
      fake_record("unikd", 4, 21.0, 500),
  };
  const auto out = std::filesystem::temp_directory_path() / "incnerf_report_test";
  std::filesystem::remove_all(out);

  SECTION("emits csv, summary, and charts") {
    auto files = report::build_report(records, out);
    REQUIRE(std::filesystem::exists(files.csv));
    REQUIRE(std::filesystem::exists(files.summary));
    REQUIRE(std::filesystem::exists(files.psnr_chart));
    REQUIRE(std::filesystem::exists(files.memory_chart));

    std::ifstream is(files.csv);
    std::string line;
    std::getline(is, line);
    REQUIRE(line == "strategy,step,metric,value,seed");
    int rows = 0;
    while (std::getline(is, line)) rows++;
    REQUIRE(rows == 3 * (4 + 4 + 4));  // psnr + ssim + memory rows per strategy
  }

  SECTION("averages in the summary match the per-step mean") {
    report::build_report(records, out);
    std::ifstream is(out / "summary.json");
    train::json j;
    is >> j;
    for (const auto& s : j.at("strategies")) {
      const std::string name = s.at("strategy").get<std::string>();
      for (const auto& r : records) {
        if (r.strategy != name) continue;
        double mean = 0.0;
        for (const auto& e : r.eval_test) mean += e.psnr;
        mean /= static_cast<double>(r.eval_test.size());
        REQUIRE(s.at("avg_psnr").get<double>() == Catch::Approx(mean).margin(1e-12));
      }
    }
  }

  SECTION("regeneration is byte-identical") {
    auto files = report::build_report(records, out);
    std::ifstream a(files.csv, std::ios::binary);
    std::string csv1((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::ifstream s1(files.summary, std::ios::binary);
    std::string sum1((std::istreambuf_iterator<char>(s1)), std::istreambuf_iterator<char>());
    report::build_report(records, out);
    std::ifstream b(files.csv, std::ios::binary);
    std::string csv2((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    std::ifstream s2(files.summary, std::ios::binary);
    std::string sum2((std::istreambuf_iterator<char>(s2)), std::istreambuf_iterator<char>());
    REQUIRE(csv1 == csv2);
    REQUIRE(sum1 == sum2);
  }

  SECTION("mixed datasets are rejected") {
    auto bad = records;
    bad[1].dataset_id = 43;
    REQUIRE_THROWS_AS(report::build_report(bad, out), UsageError);
  }

  std::filesystem::remove_all(out);
}

TEST_CASE("image grid helpers") {
  Image a = Image::zero(4, 4);
  Image b = Image::zero(4, 4);
  for (auto& v : b.data) v = 1.0f;
  auto strip = report::image_strip({a, b});
  REQUIRE(strip.width == 10);
  REQUIRE(strip.height == 4);
  REQUIRE(strip.at(0, 0, 0) == 0.0f);
  REQUIRE(strip.at(0, 6, 0) == 1.0f);
  auto stack = report::image_stack({strip, strip});
  REQUIRE(stack.height == 10);
  REQUIRE(stack.width == 10);
}

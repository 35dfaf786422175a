#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "incnerf/errors.hpp"
#include "incnerf/image.hpp"
#include "incnerf/record.hpp"

namespace incnerf::report {

using train::ExperimentRecord;

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline const char* strategy_color(const std::string& s) {
  if (s == "batch") return "#2a7de1";
  if (s == "unikd") return "#d62728";
  if (s == "naive") return "#7f7f7f";
  if (s == "keyframe-replay") return "#2ca02c";
  return "#9467bd";
}

struct Series {
  std::string name;
  std::vector<double> xs, ys;
};

// Minimal self-contained line chart; fixed layout, deterministic text.
inline std::string line_chart_svg(const std::string& title, const std::string& y_label,
                                  const std::vector<Series>& series) {
  const int width = 640, height = 420;
  const double ml = 64, mr = 24, mt = 40, mb = 48;
  double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
  for (const auto& s : series) {
    for (double x : s.xs) {
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
    }
    for (double y : s.ys) {
      y_min = std::min(y_min, y);
      y_max = std::max(y_max, y);
    }
  }
  if (x_min > x_max) {
    x_min = 0;
    x_max = 1;
  }
  if (y_min > y_max) {
    y_min = 0;
    y_max = 1;
  }
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) y_max = y_min + 1;
  const double y_pad = 0.05 * (y_max - y_min);
  y_min -= y_pad;
  y_max += y_pad;

  auto px = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * (width - ml - mr); };
  auto py = [&](double y) { return height - mb - (y - y_min) / (y_max - y_min) * (height - mt - mb); };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fmt(width / 2.0) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + title + "</text>\n";
  // axes
  svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(height - mb) + "\" x2=\"" + fmt(width - mr) +
         "\" y2=\"" + fmt(height - mb) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(mt) + "\" x2=\"" + fmt(ml) + "\" y2=\"" +
         fmt(height - mb) + "\" stroke=\"black\"/>\n";
  // y ticks
  for (int i = 0; i <= 4; i++) {
    const double y = y_min + (y_max - y_min) * i / 4.0;
    svg += "<text x=\"" + fmt(ml - 8) + "\" y=\"" + fmt(py(y) + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(y) +
           "</text>\n";
    svg += "<line x1=\"" + fmt(ml - 4) + "\" y1=\"" + fmt(py(y)) + "\" x2=\"" + fmt(ml) +
           "\" y2=\"" + fmt(py(y)) + "\" stroke=\"black\"/>\n";
  }
  // x ticks at integer steps
  for (double x = std::ceil(x_min); x <= x_max + 1e-9; x += 1.0) {
    svg += "<text x=\"" + fmt(px(x)) + "\" y=\"" + fmt(height - mb + 18) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(x) +
           "</text>\n";
  }
  svg += "<text x=\"16\" y=\"" + fmt(height / 2.0) +
         "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
         fmt(height / 2.0) + ")\" text-anchor=\"middle\">" + y_label + "</text>\n";
  svg += "<text x=\"" + fmt((ml + width - mr) / 2.0) + "\" y=\"" + fmt(height - 10.0) +
         "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">step</text>\n";

  double legend_y = mt + 8;
  for (const auto& s : series) {
    std::string points;
    for (std::size_t i = 0; i < s.xs.size(); i++) {
      points += fmt(px(s.xs[i])) + "," + fmt(py(s.ys[i])) + " ";
    }
    const char* color = strategy_color(s.name);
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
    for (std::size_t i = 0; i < s.xs.size(); i++) {
      svg += "<circle cx=\"" + fmt(px(s.xs[i])) + "\" cy=\"" + fmt(py(s.ys[i])) +
             "\" r=\"3\" fill=\"" + color + "\"/>\n";
    }
    svg += "<rect x=\"" + fmt(width - mr - 150.0) + "\" y=\"" + fmt(legend_y - 9) +
           "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
    svg += "<text x=\"" + fmt(width - mr - 132.0) + "\" y=\"" + fmt(legend_y + 2) +
           "\" font-family=\"sans-serif\" font-size=\"12\">" + s.name + "</text>\n";
    legend_y += 18;
  }
  svg += "</svg>\n";
  return svg;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

}  // namespace detail

struct ReportFiles {
  std::filesystem::path csv;
  std::filesystem::path summary;
  std::filesystem::path psnr_chart;
  std::filesystem::path memory_chart;
};

// CSV + JSON summary + SVG charts from a set of records sharing one dataset.
// Numbers are pure functions of the records; regeneration is byte-identical.
inline ReportFiles build_report(const std::vector<ExperimentRecord>& records,
                                const std::filesystem::path& out_dir) {
  if (records.empty()) throw UsageError("build_report: no records");
  for (const auto& r : records) {
    if (r.dataset_id != records[0].dataset_id) {
      throw UsageError("build_report: records come from different datasets");
    }
  }

  std::filesystem::create_directories(out_dir);

  // CSV, sorted by (strategy, step, metric)
  std::vector<const ExperimentRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->strategy < b->strategy; });

  std::string csv = "strategy,step,metric,value,seed\n";
  for (const auto* r : sorted) {
    for (const auto& e : r->eval_test) {
      csv += r->strategy + "," + std::to_string(e.step) + ",psnr," + detail::fmt(e.psnr) + "," +
             std::to_string(r->seed) + "\n";
    }
    for (const auto& e : r->eval_test) {
      csv += r->strategy + "," + std::to_string(e.step) + ",ssim," + detail::fmt(e.ssim) + "," +
             std::to_string(r->seed) + "\n";
    }
    for (const auto& s : r->steps) {
      csv += r->strategy + "," + std::to_string(s.step) + ",memory_aux_bytes," +
             std::to_string(s.memory_aux_bytes) + "," + std::to_string(r->seed) + "\n";
    }
  }

  // summary with per-strategy averages and the forgetting gap against batch
  const ExperimentRecord* batch = nullptr;
  for (const auto* r : sorted) {
    if (r->strategy == "batch") batch = r;
  }
  train::json summary;
  summary["dataset"] = records[0].dataset_path;
  summary["dataset_id"] = records[0].dataset_id;
  train::json strategies = train::json::array();
  for (const auto* r : sorted) {
    train::json s;
    s["strategy"] = r->strategy;
    s["seed"] = r->seed;
    s["avg_psnr"] = r->avg_psnr;
    s["avg_ssim"] = r->avg_ssim;
    s["memory_aux_bytes"] = r->memory.aux_bytes;
    if (batch && r != batch) {
      train::json gaps = train::json::array();
      for (std::size_t i = 0; i < r->eval_test.size() && i < batch->eval_test.size(); i++) {
        train::json g;
        g["step"] = r->eval_test[i].step;
        g["psnr_gap_vs_batch"] = batch->eval_test[i].psnr - r->eval_test[i].psnr;
        gaps.push_back(g);
      }
      s["forgetting_gap"] = gaps;
    }
    strategies.push_back(s);
  }
  summary["strategies"] = strategies;

  // charts
  std::vector<detail::Series> psnr_series, mem_series;
  for (const auto* r : sorted) {
    detail::Series ps{r->strategy, {}, {}};
    for (const auto& e : r->eval_test) {
      ps.xs.push_back(e.step);
      ps.ys.push_back(e.psnr);
    }
    psnr_series.push_back(std::move(ps));
    detail::Series ms{r->strategy, {}, {}};
    for (const auto& s : r->steps) {
      ms.xs.push_back(s.step);
      ms.ys.push_back(static_cast<double>(s.memory_aux_bytes) / (1024.0 * 1024.0));
    }
    mem_series.push_back(std::move(ms));
  }

  ReportFiles files;
  files.csv = out_dir / "report.csv";
  files.summary = out_dir / "summary.json";
  files.psnr_chart = out_dir / "psnr_vs_step.svg";
  files.memory_chart = out_dir / "memory_vs_step.svg";
  detail::write_text(files.csv, csv);
  detail::write_text(files.summary, summary.dump(2) + "\n");
  detail::write_text(files.psnr_chart,
                     detail::line_chart_svg("final-model PSNR by training step", "PSNR (dB)",
                                            psnr_series));
  detail::write_text(files.memory_chart,
                     detail::line_chart_svg("auxiliary memory by training step", "MiB",
                                            mem_series));
  return files;
}

// Horizontal strip of images separated by a 2px white gutter.
inline Image image_strip(const std::vector<Image>& images) {
  if (images.empty()) throw UsageError("image_strip: no images");
  const int h = images[0].height;
  int w_total = 0;
  for (const auto& im : images) {
    if (im.height != h) throw UsageError("image_strip: height mismatch");
    w_total += im.width + 2;
  }
  w_total -= 2;
  Image out = Image::zero(w_total, h);
  std::fill(out.data.begin(), out.data.end(), 1.0f);
  int x0 = 0;
  for (const auto& im : images) {
    for (int r = 0; r < h; r++) {
      for (int c = 0; c < im.width; c++) {
        for (int ch = 0; ch < 3; ch++) out.at(r, x0 + c, ch) = im.at(r, c, ch);
      }
    }
    x0 += im.width + 2;
  }
  return out;
}

// Vertical stack of equal-width strips.
inline Image image_stack(const std::vector<Image>& rows) {
  if (rows.empty()) throw UsageError("image_stack: no rows");
  const int w = rows[0].width;
  int h_total = 0;
  for (const auto& im : rows) {
    if (im.width != w) throw UsageError("image_stack: width mismatch");
    h_total += im.height + 2;
  }
  h_total -= 2;
  Image out = Image::zero(w, h_total);
  std::fill(out.data.begin(), out.data.end(), 1.0f);
  int y0 = 0;
  for (const auto& im : rows) {
    for (int r = 0; r < im.height; r++) {
      for (int c = 0; c < w; c++) {
        for (int ch = 0; ch < 3; ch++) out.at(y0 + r, c, ch) = im.at(r, c, ch);
      }
    }
    y0 += im.height + 2;
  }
  return out;
}

}  // namespace incnerf::report

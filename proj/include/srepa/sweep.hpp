#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "srepa/eval.hpp"
#include "srepa/train.hpp"

namespace srepa {

// One sweep axis: a set of config key-paths varied together. A plain axis has
// one key and scalar values; a tuple axis ("loss.tau_t+loss.tau_s") lists one
// value per key in each entry, for grids whose rows are pairs rather than a
// Cartesian product.
struct SweepAxis {
  std::vector<std::string> keys;
  std::vector<std::vector<nlohmann::json>> values;  // values[entry][key]
};

// Ablation grid over a base config: the Cartesian product of its axes. Axis
// order is the file order, so cell enumeration is reproducible.
struct SweepGrid {
  TrainConfig base;
  std::vector<SweepAxis> axes;

  std::size_t n_cells() const {
    std::size_t n = 1;
    for (const auto& axis : axes) n *= axis.values.size();
    return n;
  }
};

inline SweepGrid parse_sweep_grid(const TrainConfig& base,
                                  const std::string& grid_text) {
  // ordered parse: the file's axis order defines the cell enumeration
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(grid_text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("sweep grid: invalid JSON: ") +
                                e.what());
  }
  if (!j.is_object())
    throw std::invalid_argument("sweep grid: top level must be an object");
  for (const auto& [key, value] : j.items())
    if (key != "axes")
      throw std::invalid_argument("sweep grid: unknown key \"" + key + "\"");
  SweepGrid grid;
  grid.base = base;
  const auto base_json = to_json(base);
  if (j.contains("axes")) {
    if (!j.at("axes").is_object())
      throw std::invalid_argument("sweep grid: axes must be an object");
    for (const auto& [key, values] : j.at("axes").items()) {
      SweepAxis axis;
      std::size_t start = 0;
      while (start <= key.size()) {
        const auto plus = key.find('+', start);
        axis.keys.push_back(key.substr(
            start, plus == std::string::npos ? plus : plus - start));
        if (plus == std::string::npos) break;
        start = plus + 1;
      }
      for (const auto& k : axis.keys) {
        std::string p = k;
        for (auto& ch : p)
          if (ch == '.') ch = '/';
        if (k.empty() || !base_json.contains(nlohmann::json::json_pointer(
                             "/" + p)))
          throw std::invalid_argument("sweep grid: key-path \"" + k +
                                      "\" does not resolve in the base config");
      }
      if (!values.is_array() || values.empty())
        throw std::invalid_argument("sweep grid: axis \"" + key +
                                    "\" needs a non-empty value list");
      for (const auto& v : values) {
        if (axis.keys.size() == 1) {
          axis.values.push_back({v});
        } else {
          if (!v.is_array() || v.size() != axis.keys.size())
            throw std::invalid_argument(
                "sweep grid: tuple axis \"" + key + "\" entries must list " +
                std::to_string(axis.keys.size()) + " values");
          axis.values.emplace_back(v.begin(), v.end());
        }
      }
      grid.axes.push_back(std::move(axis));
    }
  }
  if (grid.n_cells() > 512)
    throw std::invalid_argument("sweep grid: " +
                                std::to_string(grid.n_cells()) +
                                " cells exceed the 512-cell limit");
  return grid;
}

// Held-out split: same geometry, disjoint seed, fixed size. Shared by the
// sweep and by directional evaluations so metrics are comparable.
inline DataConfig heldout_config(DataConfig d, std::size_t n_images = 256) {
  d.seed += 10007;
  d.n_images = n_images;
  return d;
}

// Runs every cell sequentially, training in <work_dir>/cell_<k> and flushing
// one CSV row per cell. A failed cell records its error and continues.
inline void run_sweep(const SweepGrid& grid, const std::string& csv_path,
                      const std::string& work_dir,
                      const EvalOptions& eval_opt = {}) {
  std::filesystem::create_directories(work_dir);
  if (csv_path.find('/') != std::string::npos)
    std::filesystem::create_directories(
        std::filesystem::path(csv_path).parent_path());
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("sweep: cannot write " + csv_path);
  for (const auto& axis : grid.axes)
    for (const auto& key : axis.keys) csv << key << ",";
  csv << "gram_discrepancy,frechet,loss_total,status\n" << std::flush;

  // cells share datasets; cache by data-section fingerprint
  std::map<std::string, Dataset> train_cache, heldout_cache;

  const std::size_t cells = grid.n_cells();
  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::vector<std::vector<nlohmann::json>> chosen;  // per axis, per key
    std::size_t rem = cell;
    for (std::size_t a = grid.axes.size(); a-- > 0;) {
      const auto& values = grid.axes[a].values;
      chosen.insert(chosen.begin(), values[rem % values.size()]);
      rem /= values.size();
    }
    for (const auto& vs : chosen)
      for (const auto& v : vs) csv << v.dump() << ",";
    try {
      auto j = to_json(grid.base);
      for (std::size_t a = 0; a < grid.axes.size(); ++a) {
        for (std::size_t k = 0; k < grid.axes[a].keys.size(); ++k) {
          std::string p = grid.axes[a].keys[k];
          for (auto& ch : p)
            if (ch == '.') ch = '/';
          j[nlohmann::json::json_pointer("/" + p)] = chosen[a][k];
        }
      }
      auto cfg = config_from_json(j);
      cfg.train.out_dir =
          (std::filesystem::path(work_dir) /
           ("cell_" + std::to_string(cell)))
              .string();

      const std::string data_key = j.at("data").dump();
      if (!train_cache.count(data_key))
        train_cache.emplace(data_key, generate_dataset(cfg.data));
      if (!heldout_cache.count(data_key))
        heldout_cache.emplace(data_key,
                              generate_dataset(heldout_config(cfg.data)));

      const auto dir = train_loop(cfg, train_cache.at(data_key));
      double final_loss = 0;
      {
        std::ifstream metrics(dir / "metrics.csv");
        std::string line, last;
        std::getline(metrics, line);  // header
        while (std::getline(metrics, line))
          if (!line.empty()) last = line;
        // loss_total is column 5
        std::istringstream ss(last);
        std::string field;
        for (int k = 0; k < 5; ++k) std::getline(ss, field, ',');
        final_loss = std::stod(field);
      }
      auto model = EvalModel::from_checkpoint(
          load_checkpoint((dir / "final.srpc").string()));
      auto report = evaluate_model(model, heldout_cache.at(data_key),
                                   eval_opt);
      char row[128];
      std::snprintf(row, sizeof(row), "%.9g,%.9g,%.9g,ok", report.gram,
                    report.frechet, final_loss);
      csv << row << "\n" << std::flush;
    } catch (const std::exception& e) {
      std::string msg = e.what();
      for (auto& ch : msg)
        if (ch == ',' || ch == '\n') ch = ';';
      csv << "nan,nan,nan,error: " << msg << "\n" << std::flush;
    }
  }
}

}  // namespace srepa

#include "boosts/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace boosts {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_cell(const std::string& raw, std::size_t data_row, const std::string& col) {
    const std::string s = trim(raw);
    double value = 0.0;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || s.empty()) {
        throw ValidationError("load_csv: cell at data row " + std::to_string(data_row) +
                              ", column '" + col + "' is not numeric: '" + s + "'");
    }
    return value;
}

}  // namespace

void SpatialDataset::validate() const {
    const Eigen::Index rows = n();
    if (rows < 1) throw ValidationError("dataset: needs at least one row");
    if (locations.rows() != rows || features.rows() != rows) {
        throw ValidationError("dataset: locations/features/response row counts differ");
    }
    if (locations.cols() < 1 || locations.cols() > 3) {
        throw ValidationError("dataset: coordinate dimension must be 1, 2 or 3");
    }
    if (static_cast<Eigen::Index>(feature_names.size()) != features.cols()) {
        throw ValidationError("dataset: feature_names length differs from feature count");
    }
    if (!locations.allFinite() || !features.allFinite() || !response.allFinite()) {
        throw ValidationError("dataset: non-finite value encountered");
    }
    // Duplicate coordinates make a zero-nugget covariance singular, so they
    // are rejected outright rather than jittered. Sort-based scan, O(n log n).
    std::vector<int> order(static_cast<std::size_t>(rows));
    for (Eigen::Index i = 0; i < rows; ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);
    const Eigen::MatrixXd& L = locations;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        for (Eigen::Index c = 0; c < L.cols(); ++c) {
            if (L(a, c) != L(b, c)) return L(a, c) < L(b, c);
        }
        return a < b;
    });
    for (std::size_t k = 1; k < order.size(); ++k) {
        const int a = order[k - 1], b = order[k];
        if ((L.row(a).array() == L.row(b).array()).all()) {
            throw ValidationError("dataset: duplicate coordinates at data rows " +
                                  std::to_string(std::min(a, b) + 1) + "," +
                                  std::to_string(std::max(a, b) + 1));
        }
    }
}

SpatialDataset load_csv(const std::string& path,
                        const std::vector<std::string>& coord_cols,
                        const std::vector<std::string>& feature_cols,
                        const std::string& response_col) {
    std::ifstream in(path);
    if (!in) throw IoError("load_csv: cannot open '" + path + "'");

    std::string header_line;
    if (!std::getline(in, header_line)) throw ValidationError("load_csv: empty file '" + path + "'");
    const auto header = split_line(header_line);

    std::map<std::string, int> col_index;
    for (std::size_t i = 0; i < header.size(); ++i) col_index[trim(header[i])] = static_cast<int>(i);

    auto require = [&](const std::string& name, const char* role) {
        auto it = col_index.find(name);
        if (it == col_index.end()) {
            throw ValidationError(std::string("load_csv: ") + role + " '" + name + "' not found in header");
        }
        return it->second;
    };

    std::vector<int> coord_idx, feat_idx;
    for (const auto& c : coord_cols) coord_idx.push_back(require(c, "coord_col"));
    for (const auto& f : feature_cols) feat_idx.push_back(require(f, "feature_col"));
    const int resp_idx = require(response_col, "response_col");

    std::vector<std::vector<double>> coord_rows, feat_rows;
    std::vector<double> resp_rows;
    std::string line;
    std::size_t data_row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++data_row;
        const auto cells = split_line(line);
        auto cell_at = [&](int idx, const std::string& col) -> double {
            if (idx >= static_cast<int>(cells.size())) {
                throw ValidationError("load_csv: data row " + std::to_string(data_row) +
                                      " has no cell for column '" + col + "'");
            }
            return parse_cell(cells[static_cast<std::size_t>(idx)], data_row, col);
        };
        std::vector<double> c, f;
        for (std::size_t k = 0; k < coord_idx.size(); ++k) c.push_back(cell_at(coord_idx[k], coord_cols[k]));
        for (std::size_t k = 0; k < feat_idx.size(); ++k) f.push_back(cell_at(feat_idx[k], feature_cols[k]));
        resp_rows.push_back(cell_at(resp_idx, response_col));
        coord_rows.push_back(std::move(c));
        feat_rows.push_back(std::move(f));
    }
    if (resp_rows.empty()) throw ValidationError("load_csv: no data rows in '" + path + "'");

    SpatialDataset ds;
    const auto n = static_cast<Eigen::Index>(resp_rows.size());
    ds.locations.resize(n, static_cast<Eigen::Index>(coord_cols.size()));
    ds.features.resize(n, static_cast<Eigen::Index>(feature_cols.size()));
    ds.response.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < coord_cols.size(); ++j) ds.locations(i, static_cast<Eigen::Index>(j)) = coord_rows[i][j];
        for (std::size_t j = 0; j < feature_cols.size(); ++j) ds.features(i, static_cast<Eigen::Index>(j)) = feat_rows[i][j];
        ds.response(i) = resp_rows[static_cast<std::size_t>(i)];
    }
    ds.feature_names = feature_cols;
    ds.validate();
    return ds;
}

void write_csv(const SpatialDataset& ds, const std::string& path, const std::string& response_col) {
    std::ofstream out(path);
    if (!out) throw IoError("write_csv: cannot open '" + path + "' for writing");
    for (Eigen::Index c = 0; c < ds.dim(); ++c) out << "s" << (c + 1) << ",";
    for (const auto& f : ds.feature_names) out << f << ",";
    out << response_col << "\n";
    char buf[64];
    auto emit = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << buf;
    };
    for (Eigen::Index i = 0; i < ds.n(); ++i) {
        for (Eigen::Index c = 0; c < ds.dim(); ++c) {
            emit(ds.locations(i, c));
            out << ",";
        }
        for (Eigen::Index j = 0; j < ds.n_features(); ++j) {
            emit(ds.features(i, j));
            out << ",";
        }
        emit(ds.response(i));
        out << "\n";
    }
    if (!out) throw IoError("write_csv: write failure on '" + path + "'");
}

SplitIndices split(const SpatialDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ValidationError("split: fraction must lie in (0,1)");
    }
    const auto n = static_cast<std::size_t>(ds.n());
    if (n < 2) throw ValidationError("split: need at least two rows");

    // round half away from zero, then clamp so both sides are nonempty
    auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    n_train = std::min(std::max<std::size_t>(n_train, 1), n - 1);

    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(seed);
    rng.shuffle(order);

    SplitIndices s;
    s.fraction = fraction;
    s.seed = seed;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

std::string SplitIndices::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["fraction"] = fraction;
    j["train"] = train;
    j["test"] = test;
    return j.dump();
}

SplitIndices SplitIndices::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("SplitIndices: malformed JSON: ") + e.what());
    }
    SplitIndices s;
    try {
        s.seed = j.at("seed").get<std::uint64_t>();
        s.fraction = j.at("fraction").get<double>();
        s.train = j.at("train").get<std::vector<int>>();
        s.test = j.at("test").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("SplitIndices: bad fields: ") + e.what());
    }
    return s;
}

}  // namespace boosts

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attribute_model.hpp"
#include "detail/text.hpp"
#include "error.hpp"

namespace mugshot {

struct Embedding {
    std::string subject_id;
    std::string image;
    Provenance provenance = Provenance::Original;
    std::vector<double> vector;

    void validate() const {
        if (vector.empty()) throw UsageError("embedding of '" + image + "' is empty");
        for (double v : vector)
            if (!std::isfinite(v)) throw UsageError("embedding of '" + image + "' has a non-finite value");
    }
};

inline double euclidean_distance(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size())
        throw UsageError("dimension mismatch: " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = u[i] - v[i];
        s += d * d;
    }
    return std::sqrt(s);
}

/// Cosine of the angle in [-1,1].
inline double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size())
        throw UsageError("dimension mismatch: " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw UsageError("cosine similarity of a zero vector");
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

/// Similarity on a [0,1] scale: negative cosines are reported as 0.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    return std::max(0.0, cosine(u, v));
}

enum class Semantics { Distance, Similarity };
enum class Aggregation { Mean, Min, Max };

inline std::string_view semantics_key(Semantics s) { return s == Semantics::Distance ? "distance" : "similarity"; }

inline std::string_view aggregation_key(Aggregation a) {
    switch (a) {
        case Aggregation::Mean: return "mean";
        case Aggregation::Min: return "min";
        case Aggregation::Max: return "max";
    }
    return "";
}

inline Aggregation parse_aggregation(std::string_view s) {
    const auto k = detail::to_lower(s);
    if (k == "mean") return Aggregation::Mean;
    if (k == "min") return Aggregation::Min;
    if (k == "max") return Aggregation::Max;
    throw ConfigError("unknown aggregation '" + std::string(s) + "'");
}

struct ConfusionMatrix {
    std::vector<std::string> row_ids;
    std::vector<std::string> col_ids;
    std::vector<double> cells;  // row-major
    Semantics semantics = Semantics::Distance;
    Aggregation aggregation = Aggregation::Mean;

    double at(std::size_t r, std::size_t c) const { return cells[r * col_ids.size() + c]; }
    std::size_t rows() const { return row_ids.size(); }
    std::size_t cols() const { return col_ids.size(); }
    bool square() const { return row_ids == col_ids; }

    void validate() const {
        if (cells.size() != rows() * cols()) throw EvaluationError("confusion matrix shape mismatch");
        for (double v : cells) {
            if (!std::isfinite(v)) throw EvaluationError("confusion matrix has a non-finite cell");
            if (semantics == Semantics::Distance && v < 0.0) throw EvaluationError("negative distance cell");
            if (semantics == Semantics::Similarity && (v < 0.0 || v > 1.0))
                throw EvaluationError("similarity cell outside [0,1]");
        }
    }
};

/// Embeddings grouped by subject id; std::map keeps subjects sorted.
using EmbeddingGroups = std::map<std::string, std::vector<Embedding>>;

inline EmbeddingGroups group_by_subject(const std::vector<Embedding>& embeddings) {
    EmbeddingGroups g;
    for (const auto& e : embeddings) g[e.subject_id].push_back(e);
    return g;
}

inline double pair_score(const Embedding& a, const Embedding& b, Semantics s) {
    return s == Semantics::Distance ? euclidean_distance(a.vector, b.vector) : cosine_similarity(a.vector, b.vector);
}

/// cell(i,j) aggregates the scores of every (reference of subject i, probe of subject j) pair.
inline ConfusionMatrix build_confusion_matrix(const EmbeddingGroups& refs, const EmbeddingGroups& probes,
                                              Semantics semantics, Aggregation aggregation = Aggregation::Mean) {
    std::optional<std::size_t> dim;
    auto check = [&](const EmbeddingGroups& groups, const char* side) {
        for (const auto& [id, list] : groups) {
            if (list.empty()) throw EvaluationError(std::string(side) + " group of subject '" + id + "' is empty");
            for (const auto& e : list) {
                try {
                    e.validate();
                } catch (const UsageError& err) {
                    throw EvaluationError(err.what());
                }
                if (!dim) dim = e.vector.size();
                if (*dim != e.vector.size())
                    throw EvaluationError("embedding dimension " + std::to_string(e.vector.size()) + " of '" +
                                          e.image + "' differs from " + std::to_string(*dim));
            }
        }
    };
    check(refs, "reference");
    check(probes, "probe");

    ConfusionMatrix m;
    m.semantics = semantics;
    m.aggregation = aggregation;
    for (const auto& [id, _] : refs) m.row_ids.push_back(id);
    for (const auto& [id, _] : probes) m.col_ids.push_back(id);
    m.cells.reserve(m.rows() * m.cols());
    for (const auto& [rid, rlist] : refs) {
        for (const auto& [cid, clist] : probes) {
            double sum = 0.0;
            double lo = std::numeric_limits<double>::infinity();
            double hi = -std::numeric_limits<double>::infinity();
            for (const auto& r : rlist) {
                for (const auto& p : clist) {
                    const double s = pair_score(r, p, semantics);
                    sum += s;
                    lo = std::min(lo, s);
                    hi = std::max(hi, s);
                }
            }
            const double n = static_cast<double>(rlist.size() * clist.size());
            m.cells.push_back(aggregation == Aggregation::Mean ? sum / n : aggregation == Aggregation::Min ? lo : hi);
        }
    }
    return m;
}

inline void require_square(const ConfusionMatrix& m) {
    if (!m.square() || m.rows() == 0)
        throw UsageError("operation needs a non-empty square matrix with identical row and column ids");
}

/// Fraction of rows whose strictly best cell is the diagonal one. Ties fail.
inline double identification_accuracy(const ConfusionMatrix& m) {
    require_square(m);
    const bool lower_is_better = m.semantics == Semantics::Distance;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double diag = m.at(i, i);
        bool strict = true;
        for (std::size_t j = 0; j < m.cols() && strict; ++j) {
            if (j == i) continue;
            const double other = m.at(i, j);
            strict = lower_is_better ? diag < other : diag > other;
        }
        if (strict) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(m.rows());
}

/// Mean diagonal cell: average genuine distance or similarity.
inline double mean_genuine_score(const ConfusionMatrix& m) {
    require_square(m);
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) s += m.at(i, i);
    return s / static_cast<double>(m.rows());
}

struct VerificationMetrics {
    double threshold = 0.0;
    double accuracy = 0.0;
    double false_positive_rate = 0.0;
    double false_negative_rate = 0.0;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

/// Diagonal cells are genuine pairs, the rest impostor pairs. A distance cell
/// matches when <= threshold, a similarity cell when >= threshold.
inline VerificationMetrics verification_metrics(const ConfusionMatrix& m, double threshold) {
    require_square(m);
    VerificationMetrics v;
    v.threshold = threshold;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            const double c = m.at(i, j);
            const bool match = m.semantics == Semantics::Distance ? c <= threshold : c >= threshold;
            if (i == j)
                (match ? v.tp : v.fn)++;
            else
                (match ? v.fp : v.tn)++;
        }
    }
    auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
    v.false_positive_rate = ratio(v.fp, v.fp + v.tn);
    v.false_negative_rate = ratio(v.fn, v.fn + v.tp);
    v.accuracy = ratio(v.tp + v.tn, v.tp + v.tn + v.fp + v.fn);
    return v;
}

inline constexpr std::size_t kSweepPoints = 50;

/// Metrics at evenly spaced thresholds spanning [min cell, max cell].
inline std::vector<VerificationMetrics> threshold_sweep(const ConfusionMatrix& m, std::size_t points = kSweepPoints) {
    require_square(m);
    if (points < 2) throw UsageError("a sweep needs at least two thresholds");
    const auto [lo_it, hi_it] = std::minmax_element(m.cells.begin(), m.cells.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<VerificationMetrics> out;
    out.reserve(points);
    for (std::size_t k = 0; k < points; ++k) {
        const double t = k + 1 == points ? hi : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
        out.push_back(verification_metrics(m, t));
    }
    return out;
}

// ---- I/O ---------------------------------------------------------------------

inline std::string to_csv(const ConfusionMatrix& m) {
    std::string out = "subject_id";
    for (const auto& c : m.col_ids) out += "," + detail::csv_field(c);
    out += "\n";
    for (std::size_t i = 0; i < m.rows(); ++i) {
        out += detail::csv_field(m.row_ids[i]);
        for (std::size_t j = 0; j < m.cols(); ++j) out += "," + detail::format_number(m.at(i, j));
        out += "\n";
    }
    return out;
}

inline nlohmann::json to_json(const ConfusionMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        nlohmann::json r = nlohmann::json::array();
        for (std::size_t j = 0; j < m.cols(); ++j) r.push_back(m.at(i, j));
        rows.push_back(std::move(r));
    }
    return {{"semantics", semantics_key(m.semantics)},
            {"aggregation", aggregation_key(m.aggregation)},
            {"row_ids", m.row_ids},
            {"col_ids", m.col_ids},
            {"cells", std::move(rows)}};
}

inline nlohmann::json to_json(const VerificationMetrics& v) {
    return {{"threshold", v.threshold},
            {"accuracy", v.accuracy},
            {"false_positive_rate", v.false_positive_rate},
            {"false_negative_rate", v.false_negative_rate},
            {"tp", v.tp},
            {"fp", v.fp},
            {"tn", v.tn},
            {"fn", v.fn}};
}

inline std::string sweep_to_csv(const std::vector<VerificationMetrics>& sweep) {
    std::string out = "threshold,accuracy,false_positive_rate,false_negative_rate,tp,fp,tn,fn\n";
    for (const auto& v : sweep) {
        out += detail::format_number(v.threshold) + "," + detail::format_number(v.accuracy) + "," +
               detail::format_number(v.false_positive_rate) + "," + detail::format_number(v.false_negative_rate) +
               "," + std::to_string(v.tp) + "," + std::to_string(v.fp) + "," + std::to_string(v.tn) + "," +
               std::to_string(v.fn) + "\n";
    }
    return out;
}

/// One JSON object per line: {"subject_id", "image", "provenance", "vector": [...]}.
inline std::vector<Embedding> parse_embeddings_jsonl(std::string_view text) {
    std::vector<Embedding> out;
    std::size_t line_no = 0;
    for (const auto& line : detail::split(text, '\n')) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto where = "line " + std::to_string(line_no);
        try {
            auto j = nlohmann::json::parse(line);
            Embedding e;
            e.subject_id = j.at("subject_id").get<std::string>();
            e.image = j.value("image", "");
            e.provenance = parse_provenance(j.value("provenance", "original"));
            e.vector = j.at("vector").get<std::vector<double>>();
            e.validate();
            if (!out.empty() && out.front().vector.size() != e.vector.size())
                throw ValidationError("dimension " + std::to_string(e.vector.size()) + " differs from " +
                                      std::to_string(out.front().vector.size()));
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& e) {
            throw IngestionError(where + ": " + e.what());
        } catch (const Error& e) {
            throw IngestionError(where + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<Embedding> load_embeddings_jsonl(const std::string& path) {
    return parse_embeddings_jsonl(detail::read_file(path));
}

}  // namespace mugshot

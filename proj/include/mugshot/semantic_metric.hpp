#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attribute_model.hpp"
#include "detail/text.hpp"
#include "error.hpp"

namespace mugshot {

/// Per numerical category threshold t; the zero-distance tolerance is t/4.
class NumericThresholds {
public:
    NumericThresholds() {
        t_[index_of(Category::Age)] = 10.0;
        t_[index_of(Category::Height)] = 15.0;
        t_[index_of(Category::Weight)] = 15.0;
    }

    void set(Category c, double t) {
        if (!is_numeric(c))
            throw ConfigError("threshold set for string category " + std::string(category_key(c)));
        if (!(t > 0.0) || !std::isfinite(t))
            throw ConfigError("threshold for " + std::string(category_key(c)) + " must be > 0");
        t_[index_of(c)] = t;
    }

    double threshold(Category c) const {
        if (!is_numeric(c))
            throw UsageError("no threshold for string category " + std::string(category_key(c)));
        return t_[index_of(c)];
    }

    double tolerance(Category c) const { return threshold(c) / 4.0; }

private:
    std::array<double, kCategoryCount> t_{};
};

/// Unordered label pairs at distance 0.5. The relation is deliberately not
/// transitive: it is a set of pairs, not a partition into clusters.
class EquivalenceTable {
public:
    using Pair = std::pair<std::string, std::string>;

    static EquivalenceTable defaults() {
        EquivalenceTable t;
        t.add_group(Category::EthnicGroup, {"african american", "african", "aboriginal"});
        t.add(Category::EthnicGroup, "white", "hispanic");
        t.add(Category::EthnicGroup, "hispanic", "arab");
        t.add(Category::EthnicGroup, "hispanic", "indian");
        t.add(Category::HairColor, "black", "brown");
        t.add(Category::HairColor, "blonde", "light brown");
        t.add(Category::HairColor, "brown", "light brown");
        t.add(Category::IrisColor, "black", "brown");
        t.add(Category::IrisColor, "blue", "green");
        t.add(Category::IrisColor, "green", "brown");
        return t;
    }

    void add(Category c, std::string_view a, std::string_view b) {
        if (is_numeric(c))
            throw ConfigError("equivalence pairs only apply to string categories");
        if (c == Category::Gender)
            throw ConfigError("gender is binary and takes no equivalence pairs");
        auto x = detail::normalize_text(a);
        auto y = detail::normalize_text(b);
        if (x.empty() || y.empty()) throw ConfigError("equivalence pair with empty label");
        if (x == y) throw ConfigError("equivalence pair (" + x + ", " + x + ") is reflexive");
        pairs_[index_of(c)].insert(ordered(std::move(x), std::move(y)));
    }

    /// Expands a group into all of its pairs.
    void add_group(Category c, const std::vector<std::string>& labels) {
        for (std::size_t i = 0; i < labels.size(); ++i)
            for (std::size_t j = i + 1; j < labels.size(); ++j) add(c, labels[i], labels[j]);
    }

    void clear(Category c) { pairs_[index_of(c)].clear(); }

    bool contains(Category c, const std::string& a, const std::string& b) const {
        if (a == b) return false;
        return pairs_[index_of(c)].count(ordered(a, b)) > 0;
    }

    const std::set<Pair>& pairs(Category c) const { return pairs_[index_of(c)]; }

private:
    static Pair ordered(std::string a, std::string b) {
        if (b < a) std::swap(a, b);
        return {std::move(a), std::move(b)};
    }

    std::array<std::set<Pair>, kCategoryCount> pairs_;
};

inline double numeric_distance(double a, double b, double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("numeric threshold must be > 0");
    const double h = t / 4.0;
    const double gap = std::abs(a - b);
    if (gap <= h) return 0.0;
    if (gap <= t) return (gap - h) / (t - h);
    return 1.0;
}

inline double string_distance(Category c, const std::string& a, const std::string& b,
                              const EquivalenceTable& table) {
    if (is_numeric(c))
        throw UsageError("string_distance called for numerical category " +
                         std::string(category_key(c)));
    if (a == b) return 0.0;
    if (c == Category::Gender) return 1.0;
    return table.contains(c, a, b) ? 0.5 : 1.0;
}

/// nullopt when the ground truth is unknown (category excluded from scoring).
inline std::optional<double> category_distance(const AttributeValue& truth, const AttributeValue& pred,
                                               const NumericThresholds& thresholds,
                                               const EquivalenceTable& table) {
    if (truth.category() != pred.category())
        throw UsageError("category mismatch: " + std::string(category_key(truth.category())) + " vs " +
                         std::string(category_key(pred.category())));
    if (!truth.known()) return std::nullopt;
    if (!pred.known()) return 1.0;
    const auto c = truth.category();
    if (is_numeric(c)) return numeric_distance(truth.number(), pred.number(), thresholds.threshold(c));
    return string_distance(c, truth.label(), pred.label(), table);
}

struct DistanceReport {
    std::string subject_id;
    std::string source_image;
    Provenance provenance = Provenance::Original;
    std::array<std::optional<double>, kCategoryCount> distances{};
    double mean_distance = 0.0;
    double accuracy = 100.0;

    std::optional<double> distance(Category c) const { return distances[index_of(c)]; }

    std::vector<Category> excluded() const {
        std::vector<Category> out;
        for (auto c : kAllCategories)
            if (!distances[index_of(c)]) out.push_back(c);
        return out;
    }
};

/// Builds a report from per-category distances; absent entries are excluded from the mean.
inline DistanceReport make_distance_report(std::string subject_id, std::string source_image,
                                           Provenance provenance,
                                           const std::array<std::optional<double>, kCategoryCount>& distances) {
    DistanceReport r;
    r.subject_id = std::move(subject_id);
    r.source_image = std::move(source_image);
    r.provenance = provenance;
    r.distances = distances;
    double sum = 0.0;
    int included = 0;
    for (const auto& d : distances) {
        if (!d) continue;
        if (!(*d >= 0.0 && *d <= 1.0)) throw ScoringError("category distance outside [0,1]");
        sum += *d;
        ++included;
    }
    if (included == 0)
        throw ScoringError("subject '" + r.subject_id + "' has no scorable categories");
    r.mean_distance = sum / included;
    r.accuracy = 100.0 * (1.0 - r.mean_distance);
    return r;
}

inline DistanceReport score_description(const SubjectRecord& truth, const AttributeDescription& pred,
                                        const NumericThresholds& thresholds, const EquivalenceTable& table) {
    if (truth.subject_id != pred.subject_id)
        throw UsageError("scoring description of '" + pred.subject_id + "' against record '" +
                         truth.subject_id + "'");
    std::array<std::optional<double>, kCategoryCount> d{};
    for (auto c : kAllCategories)
        d[index_of(c)] = category_distance(truth.attributes[c], pred.attributes[c], thresholds, table);
    return make_distance_report(truth.subject_id, pred.source_image, pred.provenance, d);
}

struct CohortRow {
    Provenance provenance;
    double mean_accuracy;
    std::size_t count;
};

/// Per-provenance mean accuracy, rows in Original, MAXIM, SRGAN, TVD, Generated order.
struct CohortTable {
    std::vector<CohortRow> rows;

    const CohortRow* find(Provenance p) const {
        for (const auto& r : rows)
            if (r.provenance == p) return &r;
        return nullptr;
    }
};

inline CohortTable score_cohort(const std::vector<DistanceReport>& reports) {
    if (reports.empty()) throw ScoringError("cannot aggregate an empty report list");
    std::map<Provenance, std::pair<double, std::size_t>> acc;
    for (const auto& r : reports) {
        auto& [sum, n] = acc[r.provenance];
        sum += r.accuracy;
        ++n;
    }
    CohortTable table;
    for (auto p : kAllProvenances) {
        auto it = acc.find(p);
        if (it == acc.end()) continue;
        table.rows.push_back({p, it->second.first / static_cast<double>(it->second.second),
                              it->second.second});
    }
    return table;
}

// ---- serialization -------------------------------------------------------

inline nlohmann::json to_json(const DistanceReport& r) {
    nlohmann::json j;
    j["subject_id"] = r.subject_id;
    j["source_image"] = r.source_image;
    j["provenance"] = std::string(provenance_key(r.provenance));
    nlohmann::json d = nlohmann::json::object();
    for (auto c : kAllCategories) {
        const auto& v = r.distances[index_of(c)];
        d[std::string(category_key(c))] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    }
    j["distances"] = std::move(d);
    nlohmann::json ex = nlohmann::json::array();
    for (auto c : r.excluded()) ex.push_back(std::string(category_key(c)));
    j["excluded"] = std::move(ex);
    j["mean_distance"] = r.mean_distance;
    j["accuracy"] = r.accuracy;
    return j;
}

inline std::string reports_to_csv(const std::vector<DistanceReport>& reports) {
    std::string out = "subject_id,source_image,provenance";
    for (auto c : kAllCategories) out += "," + std::string(category_key(c));
    out += ",mean_distance,accuracy\n";
    for (const auto& r : reports) {
        out += detail::csv_field(r.subject_id) + "," + detail::csv_field(r.source_image) + "," +
               std::string(provenance_key(r.provenance));
        for (const auto& d : r.distances) out += "," + (d ? detail::format_number(*d) : std::string());
        out += "," + detail::format_number(r.mean_distance) + "," + detail::format_number(r.accuracy) + "\n";
    }
    return out;
}

/// Table layout: one row per input-picture variant, the describer as the value column.
inline std::string cohort_to_csv(const CohortTable& t, const std::string& describer_label = "accuracy") {
    std::string out = "input_pictures," + detail::csv_field(describer_label) + ",count\n";
    for (const auto& r : t.rows)
        out += std::string(provenance_label(r.provenance)) + "," + detail::format_number(r.mean_accuracy) +
               "," + std::to_string(r.count) + "\n";
    return out;
}

inline nlohmann::json to_json(const CohortTable& t, const std::string& describer_label = "accuracy") {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows)
        rows.push_back({{"input_pictures", std::string(provenance_label(r.provenance))},
                        {"provenance", std::string(provenance_key(r.provenance))},
                        {"mean_accuracy", r.mean_accuracy},
                        {"count", r.count}});
    return {{"describer", describer_label}, {"rows", std::move(rows)}};
}

/// Scoring configuration: thresholds, 0.5-pairs and synonym rewrites.
struct MetricConfig {
    NumericThresholds thresholds;
    EquivalenceTable equivalence = EquivalenceTable::defaults();
    SynonymTable synonyms = SynonymTable::defaults();
};

inline Category parse_category_or_throw(const std::string& key) {
    auto c = parse_category(key);
    if (!c) throw ConfigError("unknown category '" + key + "'");
    return *c;
}

/// Reads {"thresholds": {...}, "equivalence": {cat: [[a,b],...]},
/// "equivalence_add": {...}, "synonyms": {cat: [[from,to],...]}}.
/// "equivalence" replaces a category's default pairs, "equivalence_add" extends them.
inline MetricConfig parse_metric_config(const nlohmann::json& j) {
    MetricConfig cfg;
    if (!j.is_object()) return cfg;
    try {
        if (j.contains("thresholds")) {
            for (const auto& [k, v] : j.at("thresholds").items())
                cfg.thresholds.set(parse_category_or_throw(k), v.get<double>());
        }
        auto read_pairs = [](const nlohmann::json& list) {
            std::vector<std::pair<std::string, std::string>> out;
            for (const auto& p : list) {
                if (!p.is_array() || p.size() != 2) throw ConfigError("expected [a, b] pairs");
                out.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
            }
            return out;
        };
        if (j.contains("equivalence")) {
            for (const auto& [k, v] : j.at("equivalence").items()) {
                auto c = parse_category_or_throw(k);
                cfg.equivalence.clear(c);
                for (const auto& [a, b] : read_pairs(v)) cfg.equivalence.add(c, a, b);
            }
        }
        if (j.contains("equivalence_add")) {
            for (const auto& [k, v] : j.at("equivalence_add").items()) {
                auto c = parse_category_or_throw(k);
                for (const auto& [a, b] : read_pairs(v)) cfg.equivalence.add(c, a, b);
            }
        }
        if (j.contains("synonyms")) {
            for (const auto& [k, v] : j.at("synonyms").items()) {
                auto c = parse_category_or_throw(k);
                for (const auto& [a, b] : read_pairs(v)) cfg.synonyms.add(c, a, b);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("metric config: ") + e.what());
    }
    return cfg;
}

}  // namespace mugshot

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detail/text.hpp"
#include "error.hpp"

namespace mugshot {

enum class Category { Gender, Age, EthnicGroup, HairColor, IrisColor, Height, Weight };

inline constexpr std::size_t kCategoryCount = 7;

inline constexpr std::array<Category, kCategoryCount> kAllCategories = {
    Category::Gender,    Category::Age,    Category::EthnicGroup, Category::HairColor,
    Category::IrisColor, Category::Height, Category::Weight};

inline constexpr std::size_t index_of(Category c) { return static_cast<std::size_t>(c); }

inline constexpr bool is_numeric(Category c) {
    return c == Category::Age || c == Category::Height || c == Category::Weight;
}

/// Machine key used in JSON files and CSV headers.
inline constexpr std::string_view category_key(Category c) {
    constexpr std::array<std::string_view, kCategoryCount> keys = {
        "gender", "age", "ethnic_group", "hair_color", "iris_color", "height", "weight"};
    return keys[index_of(c)];
}

/// Plain-language name, as used in questions and prompts.
inline constexpr std::string_view category_term(Category c) {
    constexpr std::array<std::string_view, kCategoryCount> terms = {
        "gender", "age", "ethnic group", "hair color", "iris color", "height", "weight"};
    return terms[index_of(c)];
}

inline constexpr std::string_view canonical_unit(Category c) {
    switch (c) {
        case Category::Age: return "years";
        case Category::Height: return "cm";
        case Category::Weight: return "kg";
        default: return "";
    }
}

inline std::optional<Category> parse_category(std::string_view key) {
    for (auto c : kAllCategories) {
        if (category_key(c) == key || category_term(c) == key) return c;
    }
    return std::nullopt;
}

enum class Provenance { Original, Maxim, Srgan, TvDenoise, Generated };

inline constexpr std::array<Provenance, 5> kAllProvenances = {
    Provenance::Original, Provenance::Maxim, Provenance::Srgan, Provenance::TvDenoise,
    Provenance::Generated};

inline constexpr std::string_view provenance_key(Provenance p) {
    constexpr std::array<std::string_view, 5> keys = {"original", "maxim", "srgan", "tvd",
                                                      "generated"};
    return keys[static_cast<std::size_t>(p)];
}

/// Row label in the cohort accuracy table.
inline constexpr std::string_view provenance_label(Provenance p) {
    constexpr std::array<std::string_view, 5> labels = {"Original", "MAXIM", "SRGAN", "TVD",
                                                        "Generated"};
    return labels[static_cast<std::size_t>(p)];
}

inline Provenance parse_provenance(std::string_view s) {
    const auto key = detail::to_lower(s);
    for (auto p : kAllProvenances) {
        if (provenance_key(p) == key || detail::to_lower(provenance_label(p)) == key) return p;
    }
    if (key == "tvdenoise" || key == "tv_denoise" || key == "tv") return Provenance::TvDenoise;
    throw UsageError("unknown provenance: " + std::string(s));
}

namespace units {
inline constexpr double kCmPerInch = 2.54;
inline constexpr double kCmPerFoot = 30.48;
inline constexpr double kKgPerPound = 0.453592;

inline double cm_to_inches(double cm) { return cm / kCmPerInch; }
inline double inches_to_cm(double in) { return in * kCmPerInch; }
inline double pounds_to_kg(double lb) { return lb * kKgPerPound; }
inline double kg_to_pounds(double kg) { return kg / kKgPerPound; }
}  // namespace units

/// One attribute observation. A value is either unknown, a positive number in the
/// category's canonical unit, or a normalized lowercase label.
class AttributeValue {
public:
    AttributeValue() = default;

    static AttributeValue unknown(Category c, std::string raw) {
        AttributeValue v;
        v.category_ = c;
        v.raw_ = std::move(raw);
        return v;
    }

    static AttributeValue numeric(Category c, std::string raw, double value) {
        if (!is_numeric(c))
            throw UsageError(std::string(category_key(c)) + " is not a numerical category");
        if (!(value > 0.0) || !std::isfinite(value))
            throw UsageError("numeric attribute value must be positive and finite");
        AttributeValue v;
        v.category_ = c;
        v.raw_ = std::move(raw);
        v.number_ = value;
        return v;
    }

    static AttributeValue label(Category c, std::string raw, std::string label) {
        if (is_numeric(c))
            throw UsageError(std::string(category_key(c)) + " is not a string category");
        if (detail::normalize_text(label) != label || label.empty())
            throw UsageError("label is not normalized: '" + label + "'");
        AttributeValue v;
        v.category_ = c;
        v.raw_ = std::move(raw);
        v.label_ = std::move(label);
        return v;
    }

    Category category() const { return category_; }
    const std::string& raw() const { return raw_; }
    bool known() const { return number_.has_value() || label_.has_value(); }

    double number() const {
        if (!number_) throw UsageError("attribute has no numeric value");
        return *number_;
    }

    const std::string& label() const {
        if (!label_) throw UsageError("attribute has no label");
        return *label_;
    }

    /// Canonical text form; re-normalizing it yields the same value.
    std::string canonical_text() const {
        if (number_) return detail::format_number(*number_) + " " + std::string(canonical_unit(category_));
        if (label_) return *label_;
        return "unknown";
    }

    friend bool operator==(const AttributeValue&, const AttributeValue&) = default;

private:
    Category category_ = Category::Gender;
    std::string raw_;
    std::optional<double> number_;
    std::optional<std::string> label_;
};

/// Exactly one value per category, indexed by category.
class AttributeSet {
public:
    AttributeSet() {
        for (auto c : kAllCategories) values_[index_of(c)] = AttributeValue::unknown(c, "");
    }

    explicit AttributeSet(std::array<AttributeValue, kCategoryCount> values)
        : values_(std::move(values)) {
        for (auto c : kAllCategories) {
            if (values_[index_of(c)].category() != c)
                throw UsageError("attribute set slot " + std::string(category_key(c)) +
                                 " holds a value of another category");
        }
    }

    const AttributeValue& operator[](Category c) const { return values_[index_of(c)]; }

    void set(AttributeValue v) { values_[index_of(v.category())] = std::move(v); }

    auto begin() const { return values_.begin(); }
    auto end() const { return values_.end(); }

    friend bool operator==(const AttributeSet&, const AttributeSet&) = default;

private:
    std::array<AttributeValue, kCategoryCount> values_;
};

struct SubjectRecord {
    std::string subject_id;
    AttributeSet attributes;
    std::vector<std::string> reference_images;
    // Older/younger pictures of the same subject, used as aging targets.
    std::vector<std::string> target_images;
    // Not scored, only used for generation prompts.
    std::optional<std::string> hair_length;
};

struct AttributeDescription {
    std::string subject_id;
    std::string source_image;
    Provenance provenance = Provenance::Original;
    AttributeSet attributes;
    std::optional<std::string> hair_length;
};

/// Ordered whole-phrase rewrites per string category.
class SynonymTable {
public:
    using Rule = std::pair<std::string, std::string>;

    SynonymTable() = default;

    static SynonymTable defaults() {
        SynonymTable t;
        t.add(Category::EthnicGroup, "caucasian", "white");
        t.add(Category::HairColor, "grey", "gray");
        t.add(Category::HairColor, "blond", "blonde");
        return t;
    }

    void add(Category c, std::string_view from, std::string_view to) {
        if (is_numeric(c))
            throw ConfigError("synonyms only apply to string categories, got " +
                              std::string(category_key(c)));
        auto f = detail::normalize_text(from);
        auto t = detail::normalize_text(to);
        if (f.empty() || t.empty()) throw ConfigError("synonym rewrite with empty side");
        auto& rules = rules_[index_of(c)];
        rules.emplace_back(f, t);
        // Every rule must still land on its own target, and targets must be fixed
        // points; that also rules out cycles and chains that undo earlier rules.
        for (const auto& [rf, rt] : rules) {
            for (const auto& probe : {rf, rt}) {
                auto once = apply(c, probe);
                if (once != rt || apply(c, once) != once) {
                    rules.pop_back();
                    throw ConfigError("synonym rewrite " + f + " -> " + t +
                                      " conflicts with the existing table");
                }
            }
        }
    }

    const std::vector<Rule>& rules(Category c) const { return rules_[index_of(c)]; }

    /// `normalized` must already be lowercase and punctuation-free.
    std::string apply(Category c, const std::string& normalized) const {
        auto words = detail::split_words(normalized);
        for (const auto& [from, to] : rules_[index_of(c)]) {
            const auto fw = detail::split_words(from);
            const auto tw = detail::split_words(to);
            std::vector<std::string> out;
            for (std::size_t i = 0; i < words.size();) {
                if (i + fw.size() <= words.size() &&
                    std::equal(fw.begin(), fw.end(), words.begin() + static_cast<long>(i))) {
                    out.insert(out.end(), tw.begin(), tw.end());
                    i += fw.size();
                } else {
                    out.push_back(words[i++]);
                }
            }
            words = std::move(out);
        }
        return detail::join(words, " ");
    }

private:
    std::array<std::vector<Rule>, kCategoryCount> rules_;
};

inline const std::vector<std::string>& unknown_markers() {
    static const std::vector<std::string> markers = {"unknown", "n/a", "not visible", ""};
    return markers;
}

inline bool is_unknown_marker(std::string_view raw) {
    const auto norm = detail::normalize_text(raw);
    for (const auto& m : unknown_markers()) {
        if (detail::normalize_text(m) == norm) return true;
    }
    return false;
}

inline AttributeValue normalize_string_value(Category c, std::string_view raw,
                                             const SynonymTable& synonyms) {
    if (is_numeric(c))
        throw UsageError("normalize_string_value called for numerical category " +
                         std::string(category_key(c)));
    if (is_unknown_marker(raw)) return AttributeValue::unknown(c, std::string(raw));
    auto label = synonyms.apply(c, detail::normalize_text(raw));
    if (label.empty()) return AttributeValue::unknown(c, std::string(raw));
    return AttributeValue::label(c, std::string(raw), std::move(label));
}

namespace detail {

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

struct Quantity {
    double value;
    std::string unit;
};

// "[about] 35", "35-40 years", "180 lbs" -> number (range midpoint) plus the trailing unit text.
inline std::optional<Quantity> parse_quantity(const std::string& text) {
    static const std::regex re(
        R"(^(?:about|approx|approximately|around|roughly|~)?\s*(\d+(?:\.\d+)?)(?:\s*(?:-|to)\s*(\d+(?:\.\d+)?))?\s*(.*)$)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) return std::nullopt;
    double v = std::stod(m[1].str());
    if (m[2].matched) v = (v + std::stod(m[2].str())) / 2.0;
    return Quantity{v, trim(m[3].str())};
}

inline bool unit_is(const std::string& unit, std::initializer_list<std::string_view> names) {
    for (auto n : names) {
        if (unit == n) return true;
    }
    return false;
}

inline std::optional<double> parse_age(const std::string& text) {
    auto q = parse_quantity(text);
    if (!q) return std::nullopt;
    if (q->unit == "s") return q->value + 5.0;  // "40s"
    if (q->unit.empty() || unit_is(q->unit, {"y", "yo", "y/o", "yr", "yrs", "year", "years",
                                             "years old", "year old", "yrs old"}))
        return q->value;
    return std::nullopt;
}

inline std::optional<double> parse_height(const std::string& text) {
    static const std::regex feet_inches(
        R"(^(\d+(?:\.\d+)?)\s*(?:'|ft\.?|feet|foot)\s*(?:(\d+(?:\.\d+)?)\s*(?:"|''|in\.?|inch|inches)?)?$)");
    std::smatch m;
    if (std::regex_match(text, m, feet_inches)) {
        double inches = m[2].matched ? std::stod(m[2].str()) : 0.0;
        return std::stod(m[1].str()) * units::kCmPerFoot + units::inches_to_cm(inches);
    }
    auto q = parse_quantity(text);
    if (!q) return std::nullopt;
    if (unit_is(q->unit, {"cm", "cms", "centimeter", "centimeters", "centimetre", "centimetres"}))
        return q->value;
    if (unit_is(q->unit, {"m", "meter", "meters", "metre", "metres"})) return q->value * 100.0;
    if (unit_is(q->unit, {"\"", "in", "in.", "inch", "inches"})) return units::inches_to_cm(q->value);
    if (q->unit.empty()) return q->value < 3.0 ? q->value * 100.0 : q->value;
    return std::nullopt;
}

inline std::optional<double> parse_weight(const std::string& text) {
    auto q = parse_quantity(text);
    if (!q) return std::nullopt;
    if (unit_is(q->unit, {"lb", "lbs", "lb.", "lbs.", "pound", "pounds"}))
        return units::pounds_to_kg(q->value);
    if (q->unit.empty() ||
        unit_is(q->unit, {"kg", "kgs", "kilo", "kilos", "kilogram", "kilograms"}))
        return q->value;
    return std::nullopt;
}

}  // namespace detail

inline AttributeValue normalize_numeric_value(Category c, std::string_view raw) {
    if (!is_numeric(c))
        throw UsageError("normalize_numeric_value called for string category " +
                         std::string(category_key(c)));
    const auto text = detail::to_lower(detail::trim(raw));
    if (is_unknown_marker(text)) return AttributeValue::unknown(c, std::string(raw));

    std::optional<double> value;
    switch (c) {
        case Category::Age: value = detail::parse_age(text); break;
        case Category::Height: value = detail::parse_height(text); break;
        case Category::Weight: value = detail::parse_weight(text); break;
        default: break;
    }
    if (!value) return AttributeValue::unknown(c, std::string(raw));
    const double rounded = detail::round2(*value);
    if (!(rounded > 0.0)) return AttributeValue::unknown(c, std::string(raw));
    return AttributeValue::numeric(c, std::string(raw), rounded);
}

inline AttributeValue normalize_value(Category c, std::string_view raw, const SynonymTable& synonyms) {
    return is_numeric(c) ? normalize_numeric_value(c, raw) : normalize_string_value(c, raw, synonyms);
}

namespace detail {

inline std::string json_scalar_text(const nlohmann::json& v, const std::string& where) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return format_number(v.get<double>());
    if (v.is_null()) return "";
    throw IngestionError(where + ": expected a string value");
}

inline std::vector<std::string> json_string_list(const nlohmann::json& obj, const char* key,
                                                 const std::string& where) {
    std::vector<std::string> out;
    if (!obj.contains(key)) return out;
    const auto& arr = obj.at(key);
    if (!arr.is_array()) throw IngestionError(where + ": field '" + key + "' must be an array");
    for (const auto& p : arr) {
        if (!p.is_string())
            throw IngestionError(where + ": field '" + key + "' must contain only strings");
        out.push_back(p.get<std::string>());
    }
    return out;
}

// Parses the "attributes" object shared by records and descriptions.
inline AttributeSet parse_attributes(const nlohmann::json& rec, const std::string& where,
                                     const SynonymTable& synonyms, bool require_all,
                                     std::optional<std::string>& hair_length) {
    if (!rec.contains("attributes") || !rec.at("attributes").is_object())
        throw IngestionError(where + ": field 'attributes' missing or not an object");
    const auto& attrs = rec.at("attributes");
    for (const auto& [key, _] : attrs.items()) {
        if (!parse_category(key) && key != "hair_length")
            throw IngestionError(where + ": unknown attribute '" + key + "'");
    }
    AttributeSet set;
    for (auto c : kAllCategories) {
        const std::string key(category_key(c));
        if (!attrs.contains(key)) {
            if (require_all)
                throw IngestionError(where + ": missing attribute '" + key + "' (category " +
                                     std::string(category_term(c)) + ")");
            continue;
        }
        set.set(normalize_value(c, json_scalar_text(attrs.at(key), where + "." + key), synonyms));
    }
    if (attrs.contains("hair_length")) {
        auto hl = normalize_text(json_scalar_text(attrs.at("hair_length"), where + ".hair_length"));
        if (!hl.empty() && !is_unknown_marker(hl)) hair_length = std::move(hl);
    }
    return set;
}

inline nlohmann::json parse_json_array_file(const std::string& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError(path + ": malformed JSON: " + e.what());
    }
    if (!doc.is_array()) throw IngestionError(path + ": top level must be a JSON array");
    return doc;
}

inline std::string required_string(const nlohmann::json& rec, const char* key, const std::string& where) {
    if (!rec.contains(key) || !rec.at(key).is_string() || rec.at(key).get<std::string>().empty())
        throw IngestionError(where + ": field '" + key + "' missing or not a non-empty string");
    return rec.at(key).get<std::string>();
}

}  // namespace detail

inline std::vector<SubjectRecord> parse_subject_records(const nlohmann::json& doc,
                                                        const SynonymTable& synonyms = SynonymTable::defaults()) {
    if (!doc.is_array()) throw IngestionError("subject records must be a JSON array");
    std::vector<SubjectRecord> out;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto where = "record " + std::to_string(i);
        const auto& rec = doc[i];
        if (!rec.is_object()) throw IngestionError(where + ": not an object");
        SubjectRecord r;
        r.subject_id = detail::required_string(rec, "subject_id", where);
        if (!seen.insert(r.subject_id).second)
            throw IngestionError(where + ": duplicate subject_id '" + r.subject_id + "'");
        r.attributes = detail::parse_attributes(rec, where, synonyms, true, r.hair_length);
        r.reference_images = detail::json_string_list(rec, "reference_images", where);
        r.target_images = detail::json_string_list(rec, "target_images", where);
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<SubjectRecord> load_subject_records(const std::string& path,
                                                       const SynonymTable& synonyms = SynonymTable::defaults()) {
    auto doc = detail::parse_json_array_file(path);
    try {
        return parse_subject_records(doc, synonyms);
    } catch (const IngestionError& e) {
        throw IngestionError(path + ": " + e.what());
    }
}

/// Descriptions file: JSON array of {subject_id, source_image, provenance, attributes}.
/// Missing categories degrade to unknown.
inline std::vector<AttributeDescription> parse_descriptions(const nlohmann::json& doc,
                                                            const SynonymTable& synonyms = SynonymTable::defaults()) {
    if (!doc.is_array()) throw IngestionError("descriptions must be a JSON array");
    std::vector<AttributeDescription> out;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto where = "description " + std::to_string(i);
        const auto& rec = doc[i];
        if (!rec.is_object()) throw IngestionError(where + ": not an object");
        AttributeDescription d;
        d.subject_id = detail::required_string(rec, "subject_id", where);
        d.source_image = rec.value("source_image", "");
        try {
            d.provenance = parse_provenance(rec.value("provenance", "original"));
        } catch (const UsageError& e) {
            throw IngestionError(where + ": " + e.what());
        }
        d.attributes = detail::parse_attributes(rec, where, synonyms, false, d.hair_length);
        out.push_back(std::move(d));
    }
    return out;
}

inline std::vector<AttributeDescription> load_descriptions(const std::string& path,
                                                           const SynonymTable& synonyms = SynonymTable::defaults()) {
    auto doc = detail::parse_json_array_file(path);
    try {
        return parse_descriptions(doc, synonyms);
    } catch (const IngestionError& e) {
        throw IngestionError(path + ": " + e.what());
    }
}

}  // namespace mugshot

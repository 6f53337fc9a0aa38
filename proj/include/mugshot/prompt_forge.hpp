#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "attribute_model.hpp"
#include "detail/text.hpp"
#include "error.hpp"

namespace mugshot {

// Text encoders of common diffusion models cap prompts at 77 tokens; at roughly
// four characters per token that is the character budget below.
inline constexpr std::size_t kDefaultMaxPromptChars = 77 * 4;

enum class TokenRole { Preamble, Gender, Age, EthnicGroup, Hair, Aging };

struct PromptToken {
    std::string text;
    TokenRole role;

    friend bool operator==(const PromptToken&, const PromptToken&) = default;
};

struct PromptSpec {
    std::vector<PromptToken> positive;
    std::vector<std::string> negative;
    std::size_t max_length = kDefaultMaxPromptChars;

    std::string rendered_positive() const {
        std::vector<std::string> parts;
        for (const auto& t : positive) parts.push_back(t.text);
        return detail::join(parts, ", ");
    }

    std::string rendered_negative() const { return detail::join(negative, ", "); }

    bool has_positive(std::string_view text) const {
        return std::any_of(positive.begin(), positive.end(), [&](const auto& t) { return t.text == text; });
    }

    bool has_negative(std::string_view text) const {
        return std::find(negative.begin(), negative.end(), text) != negative.end();
    }
};

enum class PromptFeature { Gender, Age, EthnicGroup, HairLength, HairColor };

inline constexpr std::string_view feature_name(PromptFeature f) {
    switch (f) {
        case PromptFeature::Gender: return "gender";
        case PromptFeature::Age: return "age";
        case PromptFeature::EthnicGroup: return "ethnic group";
        case PromptFeature::HairLength: return "hair length";
        case PromptFeature::HairColor: return "hair color";
    }
    return "";
}

inline PromptFeature parse_feature(std::string_view s) {
    const auto norm = detail::normalize_text(s);
    for (auto f : {PromptFeature::Gender, PromptFeature::Age, PromptFeature::EthnicGroup,
                   PromptFeature::HairLength, PromptFeature::HairColor}) {
        if (feature_name(f) == norm) return f;
    }
    throw ConfigError("unknown prompt feature '" + std::string(s) +
                      "' (expected gender, age, ethnic group, hair length or hair color)");
}

/// Which subject features may enter a generation prompt, and which terms must never appear.
struct FeatureRules {
    std::set<PromptFeature> include = {PromptFeature::Gender, PromptFeature::Age, PromptFeature::EthnicGroup,
                                       PromptFeature::HairLength, PromptFeature::HairColor};
    std::vector<std::string> exclude_terms = {"eyes",  "nose",     "ears",     "facial hair", "beard",
                                              "mustache", "clothing", "teeth", "expression"};

    void validate() const {
        for (auto f : include) {
            const auto fw = detail::split_words(feature_name(f));
            for (const auto& term : exclude_terms) {
                if (detail::normalize_text(term) == feature_name(f) ||
                    detail::contains_phrase(fw, detail::split_words(detail::normalize_text(term))))
                    throw ConfigError("prompt feature '" + std::string(feature_name(f)) +
                                      "' is both included and excluded");
            }
        }
    }

    /// True when `text` contains any exclude term as a whole-word phrase.
    bool is_excluded(std::string_view text) const {
        const auto words = detail::split_words(detail::normalize_text(text));
        for (const auto& term : exclude_terms) {
            if (detail::contains_phrase(words, detail::split_words(detail::normalize_text(term)))) return true;
        }
        return false;
    }
};

/// Versioned prompt wording, loaded from a `key = value` text file.
class PromptTemplates {
public:
    static constexpr std::string_view kDefaultText =
        "# Prompt templates. Placeholders in braces are substituted at build time.\n"
        "version = 1\n"
        "preamble = police mugshot photograph, frontal view, head and shoulders, plain light gray background, even lighting\n"
        "gender = {gender}\n"
        "age = {age} years old\n"
        "ethnic_group = {ethnic_group}\n"
        "hair = {hair_length} {hair_color} hair\n"
        "hair_color_only = {hair_color} hair\n"
        "hair_length_only = {hair_length} hair\n"
        "negative = blurry, cartoon, illustration, painting, close-up, side profile, multiple people\n"
        "question = What is the {category} of the person in this picture? Answer with a single short value.\n"
        "question.age = What is the age of the person in this picture? Answer with a number of years only.\n"
        "question.height = What is the height of the person in this picture? Answer with a single value including the unit.\n"
        "question.weight = What is the weight of the person in this picture? Answer with a single value including the unit.\n";

    static PromptTemplates defaults() { return parse(kDefaultText); }

    static PromptTemplates parse(std::string_view text) {
        PromptTemplates t;
        for (const auto& line : detail::split(text, '\n')) {
            const auto trimmed = detail::trim(line);
            if (trimmed.empty() || trimmed[0] == '#') continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos) throw ConfigError("template line without '=': " + trimmed);
            t.entries_[detail::trim(trimmed.substr(0, eq))] = detail::trim(trimmed.substr(eq + 1));
        }
        for (const char* key : {"version", "preamble", "gender", "age", "ethnic_group", "hair", "hair_color_only",
                                "hair_length_only", "negative", "question"}) {
            if (!t.entries_.count(key)) throw ConfigError(std::string("prompt templates lack key '") + key + "'");
        }
        return t;
    }

    static PromptTemplates load(const std::string& path) { return parse(detail::read_file(path)); }

    const std::string& get(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError("prompt templates lack key '" + key + "'");
        return it->second;
    }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    std::string render(const std::string& key, const std::map<std::string, std::string>& values) const {
        const auto& tmpl = get(key);
        std::string out;
        for (std::size_t i = 0; i < tmpl.size();) {
            if (tmpl[i] != '{') {
                out += tmpl[i++];
                continue;
            }
            const auto close = tmpl.find('}', i);
            if (close == std::string::npos) throw ConfigError("unterminated placeholder in template '" + key + "'");
            const auto name = tmpl.substr(i + 1, close - i - 1);
            auto it = values.find(name);
            if (it == values.end()) throw ConfigError("template '" + key + "' uses unknown placeholder {" + name + "}");
            out += it->second;
            i = close + 1;
        }
        return detail::join(detail::split_words(out), " ");
    }

    std::vector<std::string> list(const std::string& key) const {
        std::vector<std::string> out;
        for (const auto& item : detail::split(get(key), ',')) {
            auto t = detail::trim(item);
            if (!t.empty()) out.push_back(std::move(t));
        }
        return out;
    }

private:
    std::map<std::string, std::string> entries_;
};

/// One question per category, in category order.
inline std::vector<std::string> build_vlm_questions(const PromptTemplates& templates = PromptTemplates::defaults()) {
    std::vector<std::string> out;
    for (auto c : kAllCategories) {
        const auto specific = "question." + std::string(category_key(c));
        const auto key = templates.has(specific) ? specific : std::string("question");
        out.push_back(templates.render(key, {{"category", std::string(category_term(c))}}));
    }
    return out;
}

namespace detail {

inline std::size_t rendered_length(const std::vector<PromptToken>& tokens) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) n += tokens[i].text.size() + (i ? 2 : 0);
    return n;
}

// Drops whole tokens, lowest priority first, until the prompt fits.
inline void fit_to_budget(PromptSpec& spec, const std::vector<TokenRole>& drop_order) {
    for (auto role : drop_order) {
        while (rendered_length(spec.positive) > spec.max_length) {
            auto it = std::find_if(spec.positive.rbegin(), spec.positive.rend(),
                                   [&](const PromptToken& t) { return t.role == role; });
            if (it == spec.positive.rend()) break;
            spec.positive.erase(std::next(it).base());
        }
    }
    if (rendered_length(spec.positive) > spec.max_length)
        throw PromptError("prompt cannot fit within " + std::to_string(spec.max_length) + " characters");
}

inline std::string age_text(double years) { return std::to_string(std::lround(years)); }

}  // namespace detail

/// Works for SubjectRecord and AttributeDescription alike.
template <typename Subject>
PromptSpec build_generation_prompt(const Subject& subject, const FeatureRules& rules,
                                   const PromptTemplates& templates = PromptTemplates::defaults(),
                                   std::size_t max_length = kDefaultMaxPromptChars) {
    rules.validate();
    const auto& attrs = subject.attributes;
    if (!attrs[Category::Gender].known())
        throw PromptError("subject '" + subject.subject_id + "' has unknown gender");

    PromptSpec spec;
    spec.max_length = max_length;
    auto push = [&](std::string text, TokenRole role) {
        if (text.empty() || rules.is_excluded(text)) return;
        spec.positive.push_back({std::move(text), role});
    };
    auto allowed_label = [&](Category c) -> std::optional<std::string> {
        const auto& v = attrs[c];
        if (!v.known() || rules.is_excluded(v.label())) return std::nullopt;
        return v.label();
    };
    auto included = [&](PromptFeature f) { return rules.include.count(f) > 0; };

    for (auto& p : templates.list("preamble")) push(std::move(p), TokenRole::Preamble);
    if (included(PromptFeature::Gender)) {
        if (auto g = allowed_label(Category::Gender)) push(templates.render("gender", {{"gender", *g}}), TokenRole::Gender);
    }
    if (included(PromptFeature::Age) && attrs[Category::Age].known())
        push(templates.render("age", {{"age", detail::age_text(attrs[Category::Age].number())}}), TokenRole::Age);
    if (included(PromptFeature::EthnicGroup)) {
        if (auto e = allowed_label(Category::EthnicGroup))
            push(templates.render("ethnic_group", {{"ethnic_group", *e}}), TokenRole::EthnicGroup);
    }

    std::optional<std::string> length;
    if (included(PromptFeature::HairLength) && subject.hair_length && !rules.is_excluded(*subject.hair_length))
        length = *subject.hair_length;
    std::optional<std::string> color;
    if (included(PromptFeature::HairColor)) color = allowed_label(Category::HairColor);
    if (length && color)
        push(templates.render("hair", {{"hair_length", *length}, {"hair_color", *color}}), TokenRole::Hair);
    else if (color)
        push(templates.render("hair_color_only", {{"hair_color", *color}}), TokenRole::Hair);
    else if (length)
        push(templates.render("hair_length_only", {{"hair_length", *length}}), TokenRole::Hair);

    spec.negative = templates.list("negative");
    detail::fit_to_budget(spec, {TokenRole::Hair, TokenRole::EthnicGroup, TokenRole::Age});
    return spec;
}

enum class AgingDirection { Age, Deage };

inline AgingDirection parse_direction(std::string_view s) {
    const auto n = detail::normalize_text(s);
    if (n == "age" || n == "aging") return AgingDirection::Age;
    if (n == "deage" || n == "de age" || n == "de aging" || n == "deaging") return AgingDirection::Deage;
    throw ConfigError("unknown aging direction '" + std::string(s) + "'");
}

inline constexpr std::string_view direction_label(AgingDirection d) {
    return d == AgingDirection::Age ? "aging" : "de-aging";
}

inline constexpr double kWrinklesMinAge = 60.0;

/// Restates the age as the target age and injects the aging terms:
/// older targets gain "wrinkles", aging pushes "child"/"baby" into the
/// negatives, de-aging pushes "wrinkles" into the negatives.
inline PromptSpec build_aging_prompt(const PromptSpec& base, double target_age, AgingDirection direction,
                                     const FeatureRules& rules = {},
                                     const PromptTemplates& templates = PromptTemplates::defaults()) {
    if (!(target_age > 0.0)) throw UsageError("target age must be positive");
    PromptSpec spec = base;
    std::erase_if(spec.positive, [](const PromptToken& t) { return t.role == TokenRole::Age; });

    auto anchor = std::find_if(spec.positive.begin(), spec.positive.end(),
                               [](const PromptToken& t) { return t.role == TokenRole::Gender; });
    if (anchor == spec.positive.end())
        anchor = std::find_if(spec.positive.begin(), spec.positive.end(),
                              [](const PromptToken& t) { return t.role != TokenRole::Preamble; });
    else
        ++anchor;
    spec.positive.insert(anchor, {templates.render("age", {{"age", detail::age_text(target_age)}}), TokenRole::Age});

    auto add_negative = [&](const char* term) {
        if (!spec.has_negative(term)) spec.negative.emplace_back(term);
    };
    if (direction == AgingDirection::Age) {
        if (target_age >= kWrinklesMinAge && !spec.has_positive("wrinkles") && !rules.is_excluded("wrinkles"))
            spec.positive.push_back({"wrinkles", TokenRole::Aging});
        add_negative("child");
        add_negative("baby");
    } else {
        std::erase_if(spec.positive, [](const PromptToken& t) { return t.text == "wrinkles"; });
        add_negative("wrinkles");
    }
    detail::fit_to_budget(spec, {TokenRole::Hair, TokenRole::EthnicGroup});
    return spec;
}

}  // namespace mugshot

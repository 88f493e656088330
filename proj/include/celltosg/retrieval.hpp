#ifndef CELLTOSG_RETRIEVAL_HPP
#define CELLTOSG_RETRIEVAL_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "shard_store.hpp"

/**
 * @file retrieval.hpp
 * @brief Query-constrained extraction, stratified case/control balancing,
 * donor-level splitting and rare-class upsampling.
 *
 * All functions address records by their position in the attribute table.
 */

namespace celltosg::retrieval {

/** Value that unset attributes evaluate to. */
inline const std::string unknown_token = "unknown";

/** Attribute value with unset/empty optionals reported as `unknown_token`. */
inline std::string value_of(const AttributeRecord& rec, const std::string& attribute) {
    auto v = rec.get(attribute);
    return (v && !v->empty()) ? *v : unknown_token;
}

/**
 * @brief Conjunctive query: every constrained attribute must take one of its
 * admissible values.
 *
 * Unset values only match a constraint set that contains `"unknown"`.
 */
struct Query {
    std::map<std::string, std::set<std::string>> constraints;

    void validate() const {
        for (const auto& [attr, values] : constraints) {
            if (!AttributeRecord::is_attribute(attr)) {
                throw InputError("query: unknown attribute '" + attr + "'");
            }
            if (values.empty()) {
                throw InputError("query: empty admissible set for '" + attr + "'");
            }
        }
    }

    bool matches(const AttributeRecord& rec) const {
        for (const auto& [attr, values] : constraints) {
            if (!values.count(value_of(rec, attr))) {
                return false;
            }
        }
        return true;
    }

    /** The query with any constraint on `attribute` removed. */
    Query without(const std::string& attribute) const {
        Query q = *this;
        q.constraints.erase(attribute);
        return q;
    }

    /** Accepts `{"attr": "value"}` or `{"attr": ["v1", "v2"]}`. */
    static Query from_json(const nlohmann::json& j) {
        if (!j.is_object()) {
            throw InputError("query must be a JSON object");
        }
        Query q;
        for (const auto& [key, val] : j.items()) {
            auto& set = q.constraints[key];
            if (val.is_string()) {
                set.insert(val.get<std::string>());
            } else if (val.is_array()) {
                for (const auto& v : val) {
                    if (!v.is_string()) {
                        throw InputError("query: values for '" + key + "' must be strings");
                    }
                    set.insert(v.get<std::string>());
                }
            } else {
                throw InputError("query: values for '" + key + "' must be a string or list of strings");
            }
        }
        q.validate();
        return q;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [attr, values] : constraints) {
            j[attr] = std::vector<std::string>(values.begin(), values.end());
        }
        return j;
    }
};

/**
 * Positions of the records satisfying `q`, ascending. An empty query selects
 * every record.
 */
inline std::vector<std::size_t> phase1_extract(std::span<const AttributeRecord> records, const Query& q) {
    q.validate();
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (q.matches(records[i])) {
            out.push_back(i);
        }
    }
    return out;
}

/**
 * @brief Balancing configuration.
 */
struct TaskConfig {
    /** Attribute whose control value separates cases from controls. */
    std::string balance_field;
    std::string control_value;

    /** Attributes that define strata. */
    std::vector<std::string> match_keys;

    /** Position of the ordered age-stage key within `match_keys`. */
    std::size_t age_key_index = 0;

    /** Stage labels from youngest to oldest; rank = position. */
    std::vector<std::string> age_order;

    /** Largest admissible age-rank offset between a stratum and its controls. */
    long tolerance = 0;

    /** Top up short strata by resampling collected matches with replacement. */
    bool upsample = false;

    std::uint64_t seed = 0;

    void validate() const {
        if (!AttributeRecord::is_attribute(balance_field)) {
            throw InputError("task config: unknown balance field '" + balance_field + "'");
        }
        if (match_keys.empty()) {
            throw InputError("task config: match_keys is empty");
        }
        for (const auto& k : match_keys) {
            if (!AttributeRecord::is_attribute(k)) {
                throw InputError("task config: unknown match key '" + k + "'");
            }
            if (k == balance_field) {
                throw InputError("task config: balance field may not be a match key");
            }
        }
        if (age_key_index >= match_keys.size()) {
            throw InputError("task config: age_key_index out of range");
        }
        if (tolerance < 0) {
            throw InputError("task config: tolerance must be non-negative");
        }
        std::set<std::string> seen(age_order.begin(), age_order.end());
        if (age_order.empty() || seen.size() != age_order.size()) {
            throw InputError("task config: age_order must be a non-empty list of distinct labels");
        }
    }

    const std::string& age_key() const { return match_keys.at(age_key_index); }

    static TaskConfig from_json(const nlohmann::json& j) {
        TaskConfig c;
        try {
            c.balance_field = j.at("balance_field").get<std::string>();
            c.control_value = j.at("control_value").get<std::string>();
            c.match_keys = j.at("match_keys").get<std::vector<std::string>>();
            if (j.contains("age_key")) {
                const auto key = j.at("age_key").get<std::string>();
                auto it = std::find(c.match_keys.begin(), c.match_keys.end(), key);
                if (it == c.match_keys.end()) {
                    throw InputError("task config: age_key '" + key + "' is not a match key");
                }
                c.age_key_index = static_cast<std::size_t>(it - c.match_keys.begin());
            } else {
                c.age_key_index = j.at("age_key_index").get<std::size_t>();
            }
            c.age_order = j.at("age_order").get<std::vector<std::string>>();
            c.tolerance = j.value("tolerance", 0L);
            c.upsample = j.value("upsample", false);
            c.seed = j.value("seed", std::uint64_t{0});
        } catch (const nlohmann::json::exception& e) {
            throw InputError(std::string("task config: ") + e.what());
        }
        c.validate();
        return c;
    }

    nlohmann::json to_json() const {
        return {{"balance_field", balance_field}, {"control_value", control_value}, {"match_keys", match_keys},
                {"age_key_index", age_key_index},  {"age_order", age_order},         {"tolerance", tolerance},
                {"upsample", upsample},            {"seed", seed}};
    }
};

struct Stratum {
    /** Match-key tuple of the reference rows. */
    std::vector<std::string> key;
    std::vector<std::size_t> cases;
    std::vector<std::size_t> controls;
};

/**
 * @brief Balanced cohort: per retained stratum, equally many cases and controls.
 */
struct Cohort {
    /** Record positions; cases then controls for each stratum in key order. */
    std::vector<std::size_t> rows;

    /** Balance-field value of each row. */
    std::vector<std::string> labels;

    std::vector<Stratum> strata;

    /** True when the control pool was smaller and served as the matching reference. */
    bool reference_is_control = false;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["rows"] = rows;
        j["labels"] = labels;
        j["reference_is_control"] = reference_is_control;
        auto& s = j["strata"] = nlohmann::json::array();
        for (const auto& st : strata) {
            s.push_back({{"key", st.key}, {"cases", st.cases}, {"controls", st.controls}});
        }
        return j;
    }
};

namespace detail {

inline bool missing_key_value(const AttributeRecord& rec, const std::string& key) {
    auto v = rec.get(key);
    return !v || v->empty() || *v == unknown_token;
}

} // namespace detail

/**
 * Stratified case/control retrieval.
 *
 * Cases are the query hits whose balance field differs from the control
 * value; controls re-apply the query without its balance-field constraint
 * and fix the field to the control value. Rows lacking a balance value or any
 * match-key value are dropped. The smaller pool is the reference; each
 * reference stratum draws partners from the other pool whose non-age keys
 * match exactly, admitting age offsets 0, 1, ..., tolerance one layer at a
 * time. Within a layer candidates are ordered by position and sampled
 * without replacement under the seed. A partner is used at most once across
 * all strata.
 *
 * A stratum that ends short keeps all its matches and is topped up by
 * resampling them with replacement when `upsample` is set; otherwise its
 * reference rows are subsampled down to the match count. Strata without any
 * admissible partner are discarded.
 */
inline Cohort phase2_balance(std::span<const AttributeRecord> records, const Query& q, const TaskConfig& cfg) {
    q.validate();
    cfg.validate();

    std::map<std::string, long> rank;
    for (std::size_t i = 0; i < cfg.age_order.size(); ++i) {
        rank[cfg.age_order[i]] = static_cast<long>(i);
    }

    const Query q_minus_b = q.without(cfg.balance_field);
    auto has_label = [&](const AttributeRecord& rec) {
        auto v = rec.get(cfg.balance_field);
        return v && !v->empty();
    };
    auto keys_complete = [&](const AttributeRecord& rec) {
        for (const auto& k : cfg.match_keys) {
            if (detail::missing_key_value(rec, k)) {
                return false;
            }
        }
        return true;
    };

    std::vector<std::size_t> cases, controls;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (!has_label(rec) || !keys_complete(rec)) {
            continue;
        }
        const bool is_control = (*rec.get(cfg.balance_field) == cfg.control_value);
        if (!is_control && q.matches(rec)) {
            cases.push_back(i);
        } else if (is_control && q_minus_b.matches(rec)) {
            controls.push_back(i);
        }
    }

    Cohort cohort;
    cohort.reference_is_control = cases.size() > controls.size();
    const auto& ref = cohort.reference_is_control ? controls : cases;
    const auto& tgt = cohort.reference_is_control ? cases : controls;

    const std::size_t j_star = cfg.age_key_index;
    auto age_rank = [&](std::size_t row) {
        const std::string v = *records[row].get(cfg.age_key());
        auto it = rank.find(v);
        if (it == rank.end()) {
            throw InputError("record " + std::to_string(row) + ": age stage '" + v + "' is not in age_order");
        }
        return it->second;
    };
    auto full_key = [&](std::size_t row) {
        std::vector<std::string> key;
        key.reserve(cfg.match_keys.size());
        for (const auto& k : cfg.match_keys) {
            key.push_back(*records[row].get(k));
        }
        return key;
    };
    auto non_age_key = [&](std::size_t row) {
        auto key = full_key(row);
        key.erase(key.begin() + static_cast<std::ptrdiff_t>(j_star));
        return key;
    };

    std::map<std::vector<std::string>, std::vector<std::size_t>> ref_strata;
    for (std::size_t row : ref) {
        age_rank(row);
        ref_strata[full_key(row)].push_back(row);
    }
    // partner pool grouped by non-age key; rows stay in ascending order
    std::map<std::vector<std::string>, std::vector<std::pair<long, std::size_t>>> pool;
    for (std::size_t row : tgt) {
        pool[non_age_key(row)].emplace_back(age_rank(row), row);
    }

    Rng rng(cfg.seed);
    std::set<std::size_t> used;

    for (auto& [key, members] : ref_strata) {
        const std::size_t need = members.size();
        const long stratum_rank = rank.at(key[j_star]);
        auto partial = key;
        partial.erase(partial.begin() + static_cast<std::ptrdiff_t>(j_star));
        const auto pit = pool.find(partial);

        std::vector<std::size_t> match;
        if (pit != pool.end()) {
            for (long t = 0; t <= cfg.tolerance && match.size() < need; ++t) {
                std::vector<std::size_t> cand;
                for (const auto& [r, row] : pit->second) {
                    if (std::labs(r - stratum_rank) <= t && !used.count(row)) {
                        cand.push_back(row);
                    }
                }
                const std::size_t eta = std::min(need - match.size(), cand.size());
                for (std::size_t row : celltosg::detail::sample_without_replacement(std::move(cand), eta, rng)) {
                    match.push_back(row);
                    used.insert(row);
                }
            }
        }
        if (match.empty()) {
            continue;
        }

        std::vector<std::size_t> kept_ref = members;
        if (match.size() < need) {
            if (cfg.upsample) {
                const std::size_t collected = match.size();
                while (match.size() < need) {
                    match.push_back(match[celltosg::detail::uniform_index(rng, collected)]);
                }
            } else {
                kept_ref = celltosg::detail::sample_without_replacement(members, match.size(), rng);
                std::sort(kept_ref.begin(), kept_ref.end());
            }
        }

        Stratum st;
        st.key = key;
        st.cases = cohort.reference_is_control ? match : kept_ref;
        st.controls = cohort.reference_is_control ? kept_ref : match;
        for (const auto* side : {&st.cases, &st.controls}) {
            for (std::size_t row : *side) {
                cohort.rows.push_back(row);
                cohort.labels.push_back(*records[row].get(cfg.balance_field));
            }
        }
        cohort.strata.push_back(std::move(st));
    }
    return cohort;
}

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/** Donor identity: study identifier combined with the donor label. */
inline std::pair<std::string, std::string> donor_key(const AttributeRecord& rec) {
    return {rec.dataset_id, rec.donor_id};
}

/**
 * Donor-level train/test split of `rows`.
 *
 * Donors are shuffled under `seed`, then sorted by ascending size within
 * consecutive blocks of four, so smaller donors tend to come first while the
 * order stays random. Donors move to the test side in that order until the
 * test side holds at least `test_fraction` of the rows; selection stops as
 * soon as the next donor would push the test side beyond `cap` of the rows.
 */
inline Split donor_split(std::span<const AttributeRecord> records, std::span<const std::size_t> rows, double test_fraction,
                         double cap, std::uint64_t seed) {
    if (!(test_fraction > 0 && test_fraction < 1)) {
        throw InputError("donor_split: test_fraction must lie in (0, 1)");
    }
    if (!(cap > 0 && cap <= 1)) {
        throw InputError("donor_split: cap must lie in (0, 1]");
    }

    std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> donors;
    for (std::size_t row : rows) {
        const auto& rec = records[row];
        if (rec.dataset_id.empty() || rec.donor_id.empty()) {
            throw InputError("donor_split: record " + std::to_string(row) + " lacks dataset_id or donor_id");
        }
        donors[donor_key(rec)].push_back(row);
    }

    std::vector<const std::vector<std::size_t>*> order;
    for (const auto& [key, members] : donors) {
        order.push_back(&members);
    }
    Rng rng(seed);
    celltosg::detail::shuffle(order, rng);
    constexpr std::size_t block = 4;
    for (std::size_t start = 0; start < order.size(); start += block) {
        const auto end = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + block));
        std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(start), end,
                         [](const auto* a, const auto* b) { return a->size() < b->size(); });
    }

    const double total = static_cast<double>(rows.size());
    const double target = test_fraction * total;
    const double limit = cap * total;
    std::set<const std::vector<std::size_t>*> chosen;
    std::size_t test_count = 0;
    for (const auto* d : order) {
        if (static_cast<double>(test_count) >= target) {
            break;
        }
        if (static_cast<double>(test_count + d->size()) > limit) {
            break;
        }
        chosen.insert(d);
        test_count += d->size();
    }

    Split split;
    for (const auto& [key, members] : donors) {
        auto& side = chosen.count(&members) ? split.test : split.train;
        side.insert(side.end(), members.begin(), members.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

inline Split donor_split(std::span<const AttributeRecord> records, double test_fraction, double cap, std::uint64_t seed) {
    std::vector<std::size_t> all(records.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return donor_split(records, all, test_fraction, cap, seed);
}

/** Default rare-class floor. */
inline constexpr std::size_t default_min_count = 10;

struct UpsampleResult {
    std::vector<std::size_t> rows;
    std::vector<std::string> labels;

    /** Expected classes that had no members and so stayed empty. */
    std::vector<std::string> empty_classes;
};

/**
 * Bring every label class up to at least `min_count` rows by drawing extra
 * copies, with replacement, from the class's own rows. Copies are appended
 * after the input in class order.
 *
 * @param expected_classes Optional full class list, used only to report
 * classes with no members.
 */
inline UpsampleResult upsample_rare(std::span<const std::size_t> rows, std::span<const std::string> labels,
                                    std::size_t min_count, std::uint64_t seed,
                                    std::span<const std::string> expected_classes = {}) {
    if (min_count == 0) {
        throw InputError("upsample_rare: min_count must be at least 1");
    }
    if (rows.size() != labels.size()) {
        throw InputError("upsample_rare: rows and labels differ in length");
    }
    UpsampleResult out{{rows.begin(), rows.end()}, {labels.begin(), labels.end()}, {}};

    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        members[labels[i]].push_back(rows[i]);
    }
    Rng rng(seed);
    for (const auto& [label, rs] : members) {
        for (std::size_t have = rs.size(); have < min_count; ++have) {
            out.rows.push_back(rs[celltosg::detail::uniform_index(rng, rs.size())]);
            out.labels.push_back(label);
        }
    }
    for (const auto& c : expected_classes) {
        if (!members.count(c)) {
            out.empty_classes.push_back(c);
        }
    }
    return out;
}

/** Either a ratio or an absolute count; never both. */
struct SampleSpec {
    std::optional<double> ratio;
    std::optional<std::size_t> size;
    bool shuffle = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (ratio && size) {
            throw InputError("sample_ratio and sample_size are mutually exclusive");
        }
        if (ratio && !(*ratio > 0 && *ratio <= 1)) {
            throw InputError("sample_ratio must lie in (0, 1]");
        }
    }
};

/**
 * Seeded uniform subsample of aligned (rows, labels). Without `shuffle` the
 * kept rows retain their input order.
 */
inline void subsample(std::vector<std::size_t>& rows, std::vector<std::string>& labels, const SampleSpec& spec) {
    spec.validate();
    if (rows.size() != labels.size()) {
        throw InputError("subsample: rows and labels differ in length");
    }
    std::size_t keep = rows.size();
    if (spec.ratio) {
        keep = static_cast<std::size_t>(std::llround(*spec.ratio * static_cast<double>(rows.size())));
    } else if (spec.size) {
        keep = std::min(*spec.size, rows.size());
    }
    if (keep == rows.size() && !spec.shuffle) {
        return;
    }
    std::vector<std::size_t> pos(rows.size());
    for (std::size_t i = 0; i < pos.size(); ++i) {
        pos[i] = i;
    }
    Rng rng(spec.seed);
    pos = celltosg::detail::sample_without_replacement(std::move(pos), keep, rng);
    if (!spec.shuffle) {
        std::sort(pos.begin(), pos.end());
    }
    std::vector<std::size_t> r;
    std::vector<std::string> l;
    for (std::size_t p : pos) {
        r.push_back(rows[p]);
        l.push_back(labels[p]);
    }
    rows = std::move(r);
    labels = std::move(l);
}

} // namespace celltosg::retrieval

#endif

#include <gtest/gtest.h>

#include <algorithm>

#include <celltosg/retrieval.hpp>

#include "sra_oracle.hpp"

using namespace celltosg;
using namespace celltosg::retrieval;

namespace {

AttributeRecord rec(const std::string& tissue, const std::string& disease, const std::string& age,
                    const std::string& donor = "d0", const std::string& dataset = "ds0") {
    AttributeRecord r;
    r.dataset_id = dataset;
    r.donor_id = donor;
    r.tissue_general = tissue;
    r.disease_BMG_name = disease;
    r.set("development_stage_category", age);
    r.matrix_file_path = "part_00000.npy";
    return r;
}

TaskConfig age_tissue_cfg(long tolerance, bool upsample) {
    TaskConfig cfg;
    cfg.balance_field = "disease_BMG_name";
    cfg.control_value = "normal";
    cfg.match_keys = {"development_stage_category", "tissue_general"};
    cfg.age_key_index = 0;
    cfg.age_order = {"fetal", "child", "adult", "aged"};
    cfg.tolerance = tolerance;
    cfg.upsample = upsample;
    cfg.seed = 17;
    return cfg;
}

Query disease_query(const std::string& d) {
    Query q;
    q.constraints["disease_BMG_name"] = {d};
    return q;
}

} // namespace

TEST(Phase1, SelectsMatchingRows) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("lung", "AD", "adult"), rec("brain", "AD", "adult")};
    Query q;
    q.constraints["tissue_general"] = {"brain"};
    EXPECT_EQ(phase1_extract(r, q), (std::vector<std::size_t>{0, 2}));
}

TEST(Phase1, EmptyQuerySelectsAll) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("lung", "AD", "adult")};
    EXPECT_EQ(phase1_extract(r, Query{}), (std::vector<std::size_t>{0, 1}));
}

TEST(Phase1, UnknownAttributeIsRejected) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult")};
    Query q;
    q.constraints["organ"] = {"brain"};
    EXPECT_THROW(phase1_extract(r, q), InputError);
    EXPECT_THROW(Query::from_json(nlohmann::json{{"organ", "x"}}), InputError);
}

TEST(Phase1, UnsetValueMatchesOnlyUnknown) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("brain", "AD", "")};
    Query q;
    q.constraints["development_stage_category"] = {"unknown"};
    EXPECT_EQ(phase1_extract(r, q), (std::vector<std::size_t>{1}));
}

TEST(Phase1, MatchesBruteForceOnRandomTables) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        auto inst = support::random_sra_instance(rng, 200);
        EXPECT_EQ(phase1_extract(inst.records, inst.query), support::brute_force_filter(inst.records, inst.query));
    }
}

TEST(Phase1, QueryJsonRoundTrip) {
    const auto q = Query::from_json(nlohmann::json::parse(R"({"tissue_general":"brain","sex_normalized":["male","female"]})"));
    EXPECT_EQ(q.constraints.at("sex_normalized").size(), 2u);
    EXPECT_EQ(Query::from_json(q.to_json()).constraints, q.constraints);
}

TEST(Phase2, ExactStratumSamplesWithoutReplacement) {
    // 2 cases, 3 exact controls: every 2-subset of the controls is admissible
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("brain", "AD", "adult"),
                                   rec("brain", "normal", "adult"), rec("brain", "normal", "adult"),
                                   rec("brain", "normal", "adult")};
    const auto cfg = age_tissue_cfg(0, false);
    const auto c = phase2_balance(r, disease_query("AD"), cfg);
    ASSERT_EQ(c.strata.size(), 1u);
    EXPECT_FALSE(c.reference_is_control);
    EXPECT_EQ(c.strata[0].cases, (std::vector<std::size_t>{0, 1}));
    auto ctrl = c.strata[0].controls;
    std::sort(ctrl.begin(), ctrl.end());
    const std::vector<std::vector<std::size_t>> admissible{{2, 3}, {2, 4}, {3, 4}};
    EXPECT_NE(std::find(admissible.begin(), admissible.end(), ctrl), admissible.end());
    EXPECT_EQ(support::check_cohort({r, disease_query("AD"), cfg}, c), "");
}

TEST(Phase2, StratumWithoutPartnersIsDiscarded) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "fetal"), rec("lung", "AD", "adult"),
                                   rec("lung", "normal", "adult")};
    const auto c = phase2_balance(r, disease_query("AD"), age_tissue_cfg(2, true));
    ASSERT_EQ(c.strata.size(), 1u);
    EXPECT_EQ(c.strata[0].key, (std::vector<std::string>{"adult", "lung"}));
    EXPECT_EQ(c.rows, (std::vector<std::size_t>{1, 2}));
}

TEST(Phase2, OffsetLayerAdmitsNeighbouringAge) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("brain", "normal", "aged")};
    const auto c = phase2_balance(r, disease_query("AD"), age_tissue_cfg(1, false));
    ASSERT_EQ(c.strata.size(), 1u);
    EXPECT_EQ(c.strata[0].cases, (std::vector<std::size_t>{0}));
    EXPECT_EQ(c.strata[0].controls, (std::vector<std::size_t>{1}));

    const auto strict = phase2_balance(r, disease_query("AD"), age_tissue_cfg(0, false));
    EXPECT_TRUE(strict.strata.empty());
    EXPECT_TRUE(strict.rows.empty());
}

TEST(Phase2, ExactLayerIsExhaustedFirst) {
    // one exact control and one at offset 1; a single case must take the exact one
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("brain", "normal", "aged"),
                                   rec("brain", "normal", "adult")};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto cfg = age_tissue_cfg(1, false);
        cfg.seed = seed;
        const auto c = phase2_balance(r, disease_query("AD"), cfg);
        ASSERT_EQ(c.strata.size(), 1u);
        EXPECT_EQ(c.strata[0].controls, (std::vector<std::size_t>{2}));
    }
}

TEST(Phase2, LargerCasePoolSwapsReference) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("brain", "AD", "adult"),
                                   rec("brain", "AD", "adult"), rec("brain", "normal", "adult")};
    const auto c = phase2_balance(r, disease_query("AD"), age_tissue_cfg(0, false));
    EXPECT_TRUE(c.reference_is_control);
    ASSERT_EQ(c.strata.size(), 1u);
    EXPECT_EQ(c.strata[0].controls, (std::vector<std::size_t>{3}));
    ASSERT_EQ(c.strata[0].cases.size(), 1u);
    EXPECT_LT(c.strata[0].cases[0], 3u);
}

TEST(Phase2, ShortStratumSubsampledOrUpsampled) {
    // 3 cases against 3 controls in total, only 1 of which is exact
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"),    rec("brain", "AD", "adult"),
                                   rec("brain", "AD", "adult"),    rec("brain", "normal", "adult"),
                                   rec("lung", "normal", "adult"), rec("lung", "normal", "adult")};
    const auto q = disease_query("AD");

    const auto plain = phase2_balance(r, q, age_tissue_cfg(0, false));
    ASSERT_EQ(plain.strata.size(), 1u);
    EXPECT_EQ(plain.strata[0].cases.size(), 1u);
    EXPECT_EQ(plain.strata[0].controls, (std::vector<std::size_t>{3}));

    const auto cfg_up = age_tissue_cfg(0, true);
    const auto up = phase2_balance(r, q, cfg_up);
    ASSERT_EQ(up.strata.size(), 1u);
    EXPECT_EQ(up.strata[0].cases, (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(up.strata[0].controls, (std::vector<std::size_t>{3, 3, 3}));
    EXPECT_EQ(support::check_cohort({r, q, cfg_up}, up), "");
}

TEST(Phase2, MissingMatchKeyRowsAreDropped) {
    std::vector<AttributeRecord> r{rec("brain", "AD", ""), rec("brain", "normal", "adult")};
    const auto c = phase2_balance(r, disease_query("AD"), age_tissue_cfg(3, true));
    EXPECT_TRUE(c.strata.empty());
}

TEST(Phase2, AbsentControlValueGivesEmptyCohort) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult"), rec("brain", "LUAD", "adult")};
    auto cfg = age_tissue_cfg(1, true);
    cfg.control_value = "healthy";
    const auto c = phase2_balance(r, Query{}, cfg);
    EXPECT_TRUE(c.rows.empty());
}

TEST(Phase2, ConfigErrors) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "adult")};
    auto cfg = age_tissue_cfg(-1, false);
    EXPECT_THROW(phase2_balance(r, Query{}, cfg), InputError);
    cfg = age_tissue_cfg(0, false);
    cfg.match_keys.push_back("disease_BMG_name");
    EXPECT_THROW(phase2_balance(r, Query{}, cfg), InputError);
    cfg = age_tissue_cfg(0, false);
    cfg.age_key_index = 5;
    EXPECT_THROW(phase2_balance(r, Query{}, cfg), InputError);
}

TEST(Phase2, UnknownAgeLabelIsReported) {
    std::vector<AttributeRecord> r{rec("brain", "AD", "elderly"), rec("brain", "normal", "adult")};
    EXPECT_THROW(phase2_balance(r, disease_query("AD"), age_tissue_cfg(0, false)), InputError);
}

TEST(Phase2, RandomInstancesSatisfyInvariantsAndAreDeterministic) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        auto inst = support::random_sra_instance(rng, 300);
        const auto a = phase2_balance(inst.records, inst.query, inst.cfg);
        EXPECT_EQ(support::check_cohort(inst, a), "") << "trial " << trial;
        const auto b = phase2_balance(inst.records, inst.query, inst.cfg);
        EXPECT_EQ(a.to_json(), b.to_json());
    }
}

TEST(Phase2, TaskConfigJsonRoundTrip) {
    const auto cfg = age_tissue_cfg(2, true);
    EXPECT_EQ(TaskConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
}

TEST(DonorSplit, SingleDonorExceedsCap) {
    std::vector<AttributeRecord> r(10, rec("brain", "AD", "adult", "d0"));
    const auto s = donor_split(r, 0.2, 0.3, 1);
    EXPECT_TRUE(s.test.empty());
    EXPECT_EQ(s.train.size(), 10u);
}

TEST(DonorSplit, TwoEqualDonorsGiveOneTestDonor) {
    std::vector<AttributeRecord> r;
    for (int i = 0; i < 100; ++i) {
        r.push_back(rec("brain", "AD", "adult", i < 50 ? "a" : "b"));
    }
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto s = donor_split(r, 0.5, 0.6, seed);
        ASSERT_EQ(s.test.size(), 50u);
        const auto donor = r[s.test.front()].donor_id;
        for (auto i : s.test) {
            EXPECT_EQ(r[i].donor_id, donor);
        }
    }
}

TEST(DonorSplit, DonorKeyIncludesDataset) {
    // same donor label in two studies counts as two donors
    std::vector<AttributeRecord> r;
    for (int i = 0; i < 20; ++i) {
        r.push_back(rec("brain", "AD", "adult", "x", i < 10 ? "s1" : "s2"));
    }
    const auto s = donor_split(r, 0.4, 0.5, 3);
    EXPECT_EQ(s.test.size(), 10u);
}

TEST(DonorSplit, RandomInstancesNeverLeak) {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        auto inst = support::random_sra_instance(rng, 200);
        const double cap = 0.2 + 0.6 * celltosg::detail::uniform01(rng);
        const auto s = donor_split(inst.records, 0.2, cap, trial);
        EXPECT_EQ(s.train.size() + s.test.size(), inst.records.size());
        EXPECT_LE(static_cast<double>(s.test.size()), cap * static_cast<double>(inst.records.size()));
        std::set<std::pair<std::string, std::string>> train_donors;
        for (auto i : s.train) {
            train_donors.insert(donor_key(inst.records[i]));
        }
        for (auto i : s.test) {
            EXPECT_FALSE(train_donors.count(donor_key(inst.records[i])));
        }
    }
}

TEST(DonorSplit, ArgumentErrors) {
    std::vector<AttributeRecord> r(3, rec("brain", "AD", "adult"));
    EXPECT_THROW(donor_split(r, 0.0, 0.5, 0), InputError);
    EXPECT_THROW(donor_split(r, 1.0, 0.5, 0), InputError);
    r[1].donor_id.clear();
    EXPECT_THROW(donor_split(r, 0.2, 0.5, 0), InputError);
}

TEST(Upsample, SmallClassReachesFloor) {
    std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<std::string> labels{"a", "a", "a", "b", "b", "b", "b", "b"};
    const auto out = upsample_rare(rows, labels, 5, 9);
    ASSERT_EQ(out.rows.size(), 10u);
    for (std::size_t i = 8; i < 10; ++i) {
        EXPECT_EQ(out.labels[i], "a");
        EXPECT_LT(out.rows[i], 3u);
    }
}

TEST(Upsample, NoOpWhenAllClassesLargeEnough) {
    std::vector<std::size_t> rows{4, 2, 9};
    std::vector<std::string> labels{"x", "y", "x"};
    const auto out = upsample_rare(rows, labels, 1, 0);
    EXPECT_EQ(out.rows, rows);
    EXPECT_EQ(out.labels, labels);
}

TEST(Upsample, EmptyClassIsReported) {
    std::vector<std::size_t> rows{0};
    std::vector<std::string> labels{"x"};
    std::vector<std::string> expected{"x", "z"};
    const auto out = upsample_rare(rows, labels, 3, 0, expected);
    EXPECT_EQ(out.empty_classes, (std::vector<std::string>{"z"}));
    EXPECT_EQ(std::count(out.labels.begin(), out.labels.end(), "z"), 0);
    EXPECT_THROW(upsample_rare(rows, labels, 0, 0), InputError);
}

TEST(Upsample, DuplicatesKeepTheirClass) {
    Rng rng(2);
    std::vector<std::size_t> rows;
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < 60; ++i) {
        rows.push_back(i);
        labels.push_back("c" + std::to_string(celltosg::detail::uniform_index(rng, 6)));
    }
    const auto out = upsample_rare(rows, labels, 15, 4);
    std::map<std::size_t, std::string> label_of;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        label_of[rows[i]] = labels[i];
    }
    std::map<std::string, std::size_t> counts;
    for (std::size_t i = 0; i < out.rows.size(); ++i) {
        EXPECT_EQ(label_of.at(out.rows[i]), out.labels[i]);
        ++counts[out.labels[i]];
    }
    for (const auto& [label, n] : counts) {
        EXPECT_GE(n, 15u) << label;
    }
}

TEST(Subsample, RatioAndSizeAreExclusive) {
    std::vector<std::size_t> rows{0, 1, 2, 3};
    std::vector<std::string> labels{"a", "b", "c", "d"};
    SampleSpec spec;
    spec.ratio = 0.5;
    spec.size = 2;
    EXPECT_THROW(subsample(rows, labels, spec), InputError);
}

TEST(Subsample, KeepsOrderAndAlignment) {
    std::vector<std::size_t> rows{10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
    std::vector<std::string> labels;
    for (auto r : rows) {
        labels.push_back(std::to_string(r));
    }
    SampleSpec spec;
    spec.ratio = 0.3;
    spec.seed = 8;
    subsample(rows, labels, spec);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_TRUE(std::is_sorted(rows.begin(), rows.end()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(labels[i], std::to_string(rows[i]));
    }
}

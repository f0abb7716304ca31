// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <sstream>

#include "amnet/dataio.hpp"

using namespace amnet;
using namespace amnet::dataio;
using Catch::Approx;

namespace {

const char* kHeader =
    "student_id,exercise_id,part,audio_duration_s,received_at_ms,elapsed_time_s,correctness\n";

std::vector<StudentTimeline> parse_str(const std::string& csv) {
    std::istringstream in(csv);
    return parse_interactions(in);
}

Interaction make_interaction(const std::string& ex, int correctness, std::int64_t at = 0) {
    Interaction it;
    it.exercise_id = ex;
    it.part = 5;
    it.received_at_ms = at;
    it.elapsed_time_s = 10.0;
    it.correctness = correctness;
    return it;
}

} // namespace

TEST_CASE("time limits per part", "[dataio]") {
    REQUIRE(time_limit(5, std::nullopt) == 25.0);
    REQUIRE(time_limit(6, std::nullopt) == 50.0);
    REQUIRE(time_limit(7, std::nullopt) == 55.0);
    REQUIRE(time_limit(2, 10.0) == 18.0);
    REQUIRE_THROWS_AS(time_limit(0, std::nullopt), DataError);
    REQUIRE_THROWS_AS(time_limit(8, std::nullopt), DataError);
    REQUIRE_THROWS_AS(time_limit(3, std::nullopt), DataError);
}

TEST_CASE("parse computes inactive gaps and timeliness", "[dataio]") {
    auto tls = parse_str(std::string(kHeader) +
                         "s1,e1,5,,1000,10,1\n"
                         "s1,e2,5,,31000,30,0\n");
    REQUIRE(tls.size() == 1);
    REQUIRE(tls[0].interactions.size() == 2);
    REQUIRE(tls[0].interactions[0].inactive_time_s == 0.0);
    REQUIRE(tls[0].interactions[1].inactive_time_s == Approx(30.0));
    REQUIRE(tls[0].interactions[0].timeliness == 1);  // 10 <= 25
    REQUIRE(tls[0].interactions[1].timeliness == 0);  // 30 > 25
}

TEST_CASE("timeliness boundary is inclusive", "[dataio]") {
    auto tls = parse_str(std::string(kHeader) + "s1,e1,5,,0,25,1\n");
    REQUIRE(tls[0].interactions[0].timeliness == 1);
}

TEST_CASE("interleaved students are split and sorted", "[dataio]") {
    auto tls = parse_str(std::string(kHeader) +
                         "s2,e1,5,,5000,1,1\n"
                         "s1,e1,5,,2000,1,1\n"
                         "s2,e2,5,,1000,1,0\n"
                         "s1,e2,5,,9000,1,0\n");
    REQUIRE(tls.size() == 2);
    REQUIRE(tls[0].student_id == "s1");
    REQUIRE(tls[1].student_id == "s2");
    REQUIRE(tls[1].interactions[0].exercise_id == "e2");
    REQUIRE(tls[1].interactions[1].exercise_id == "e1");
}

TEST_CASE("out-of-order rows round-trip to sorted canonical form", "[dataio]") {
    const std::string unsorted = std::string(kHeader) +
                                 "s1,e2,5,,9000,3,0\n"
                                 "s1,e1,2,12.5,2000,7,1\n";
    auto tls = parse_str(unsorted);
    std::ostringstream out1;
    write_interactions(out1, tls);
    auto tls2 = parse_str(out1.str());
    std::ostringstream out2;
    write_interactions(out2, tls2);
    REQUIRE(out1.str() == out2.str()); // export . parse is a fixed point
    REQUIRE(tls2[0].interactions[0].exercise_id == "e1");
    REQUIRE(tls2[0].interactions[0].audio_duration_s == 12.5);
}

TEST_CASE("schema and row errors carry context", "[dataio]") {
    std::istringstream missing("student_id,exercise_id,part\n");
    try {
        parse_interactions(missing);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("audio_duration_s") != std::string::npos);
    }

    try {
        parse_str(std::string(kHeader) + "s1,e1,5,,1000,ten,1\n");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }

    REQUIRE_THROWS_AS(parse_str(std::string(kHeader) + "s1,e1,5,3.0,1000,1,1\n"), DataError);
    REQUIRE_THROWS_AS(parse_str(std::string(kHeader) + "s1,e1,2,,1000,1,1\n"), DataError);
}

TEST_CASE("review extraction on hand traces", "[dataio]") {
    StudentTimeline tl;
    tl.student_id = "s";
    SECTION("A B A") {
        tl.interactions = {make_interaction("A", 1, 0), make_interaction("B", 0, 1),
                           make_interaction("A", 0, 2)};
        auto insts = extract_review_instances(tl);
        REQUIRE(insts.size() == 1);
        REQUIRE(insts[0].input.size() == 1);
        REQUIRE(insts[0].input[0].exercise_id == "B");
        REQUIRE(insts[0].target->exercise_id == "A");
        REQUIRE(insts[0].label == 0.0);
    }
    SECTION("adjacent repeat gives empty input") {
        tl.interactions = {make_interaction("A", 0, 0), make_interaction("A", 1, 1)};
        auto insts = extract_review_instances(tl);
        REQUIRE(insts.size() == 1);
        REQUIRE(insts[0].input.empty());
        REQUIRE(insts[0].target->exercise_id == "A");
        REQUIRE(insts[0].label == 1.0);
    }
    SECTION("A B C B A B uses only first pairs") {
        tl.interactions = {make_interaction("A", 1, 0), make_interaction("B", 0, 1),
                           make_interaction("C", 1, 2), make_interaction("B", 1, 3),
                           make_interaction("A", 0, 4), make_interaction("B", 0, 5)};
        auto insts = extract_review_instances(tl);
        REQUIRE(insts.size() == 2);
        std::map<std::string, TaskInstance> by_target;
        for (auto& i : insts) by_target[i.target->exercise_id] = i;
        REQUIRE(by_target["A"].input.size() == 3);
        REQUIRE(by_target["A"].label == 0.0); // correctness of position 5
        REQUIRE(by_target["B"].input.size() == 1);
        REQUIRE(by_target["B"].input[0].exercise_id == "C");
        REQUIRE(by_target["B"].label == 1.0); // correctness of position 4
    }
}

TEST_CASE("review extraction agrees with a brute-force pair scan", "[dataio]") {
    auto eng = rng::make_engine(21);
    for (int trial = 0; trial < 50; ++trial) {
        StudentTimeline tl;
        tl.student_id = "s";
        const std::size_t len = 5 + rng::below(eng, 30);
        for (std::size_t t = 0; t < len; ++t) {
            const std::string ex = "e" + std::to_string(rng::below(eng, 8));
            tl.interactions.push_back(
                make_interaction(ex, static_cast<int>(rng::below(eng, 2)), static_cast<std::int64_t>(t)));
        }
        // oracle: first two occurrences of each exercise by full scan
        std::map<std::string, std::vector<std::size_t>> occurrences;
        for (std::size_t t = 0; t < len; ++t)
            occurrences[tl.interactions[t].exercise_id].push_back(t);
        std::map<std::string, std::pair<std::size_t, std::size_t>> expected;
        for (const auto& [ex, occ] : occurrences)
            if (occ.size() >= 2) expected[ex] = {occ[0], occ[1]};

        auto insts = extract_review_instances(tl);
        REQUIRE(insts.size() == expected.size());
        for (const auto& inst : insts) {
            auto [i, j] = expected.at(inst.target->exercise_id);
            REQUIRE(inst.input.size() == j - i - 1);
            REQUIRE(inst.label == tl.interactions[j].correctness);
            for (std::size_t k = 0; k < inst.input.size(); ++k)
                REQUIRE(inst.input[k].exercise_id == tl.interactions[i + 1 + k].exercise_id);
        }
    }
}

TEST_CASE("leakage exclusion removes labeled students", "[dataio]") {
    std::vector<StudentTimeline> tls(3);
    tls[0].student_id = "a";
    tls[1].student_id = "b";
    tls[2].student_id = "c";
    auto kept = exclude_leakage(tls, {"b"});
    REQUIRE(kept.size() == 2);
    REQUIRE(kept[0].student_id == "a");
    REQUIRE(kept[1].student_id == "c");
    REQUIRE(exclude_leakage(tls, {}).size() == 3);
}

TEST_CASE("leakage exclusion on a 1000-student fixture", "[dataio]") {
    std::vector<StudentTimeline> tls(1000);
    std::set<std::string> labeled;
    auto eng = rng::make_engine(22);
    for (int i = 0; i < 1000; ++i) {
        tls[i].student_id = "s" + std::to_string(i);
        if (rng::uniform01(eng) < 0.1) labeled.insert(tls[i].student_id);
    }
    auto kept = exclude_leakage(tls, labeled);
    REQUIRE(kept.size() == 1000 - labeled.size());
    for (const auto& tl : kept) REQUIRE(labeled.count(tl.student_id) == 0);
}

TEST_CASE("fold splits have 3/1/1 proportions and partition the set", "[dataio]") {
    std::vector<TaskInstance> insts(10);
    for (int i = 0; i < 10; ++i) insts[i].student_id = "s" + std::to_string(i);
    auto folds = split_folds(insts, 5);
    REQUIRE(folds.size() == 5);
    for (const auto& f : folds) {
        REQUIRE(f.test.size() == 2);
        REQUIRE(f.validation.size() == 2);
        REQUIRE(f.train.size() == 6);
        for (const auto& s : f.test) {
            REQUIRE(f.train.count(s) == 0);
            REQUIRE(f.validation.count(s) == 0);
        }
    }
    auto folds2 = split_folds(insts, 5);
    for (int k = 0; k < 5; ++k) REQUIRE(folds[k].test == folds2[k].test); // determinism
}

TEST_CASE("fold splits at the reported population size", "[dataio]") {
    std::vector<TaskInstance> insts(2594);
    for (int i = 0; i < 2594; ++i) insts[i].student_id = "s" + std::to_string(i);
    auto folds = split_folds(insts, 17);
    std::multiset<std::size_t> sizes;
    std::set<std::string> all_test;
    for (const auto& f : folds) {
        sizes.insert(f.test.size());
        for (const auto& s : f.test) REQUIRE(all_test.insert(s).second); // appears once
    }
    REQUIRE(all_test.size() == 2594);
    REQUIRE(sizes == std::multiset<std::size_t>{519, 519, 519, 519, 518});
}

TEST_CASE("fold split rejects insufficient data", "[dataio]") {
    std::vector<TaskInstance> insts(4);
    for (int i = 0; i < 4; ++i) insts[i].student_id = "s" + std::to_string(i);
    REQUIRE_THROWS_AS(split_folds(insts, 1), DataError);
}

TEST_CASE("exam instances take the most recent window before the report", "[dataio]") {
    StudentTimeline tl;
    tl.student_id = "s1";
    for (int t = 0; t < 8; ++t) tl.interactions.push_back(make_interaction("e", 1, t * 1000));
    ExamLabel lbl{"s1", 5500, 700.0};
    auto insts = build_exam_instances({tl}, {lbl}, 3);
    REQUIRE(insts.size() == 1);
    REQUIRE(insts[0].input.size() == 3); // interactions at 3000, 4000, 5000
    REQUIRE(insts[0].input.front().received_at_ms == 3000);
    REQUIRE(insts[0].input.back().received_at_ms == 5000);
    REQUIRE(insts[0].label == 700.0);
    REQUIRE_FALSE(insts[0].target.has_value());
}

TEST_CASE("exam labels round-trip", "[dataio]") {
    std::vector<ExamLabel> labels{{"s2", 100, 655.0}, {"s1", 50, 10.0}};
    std::ostringstream out;
    write_exam_labels(out, labels);
    std::istringstream in(out.str());
    auto parsed = parse_exam_labels(in);
    REQUIRE(parsed.size() == 2);
    REQUIRE(parsed[0].student_id == "s1"); // sorted on export
    REQUIRE(parsed[1].score == 655.0);
}

// SPDX-License-Identifier: Apache-2.0
//
// Interaction-log ingestion: canonical CSV parsing, per-student timeline
// reconstruction, derived assessments (timeliness, inactive time),
// downstream task-instance builders and fold splitting.
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "amnet/errors.hpp"
#include "amnet/rng.hpp"

namespace amnet::dataio {

struct Interaction {
    std::string exercise_id;
    int part = 0; // 1..7
    std::optional<double> audio_duration_s; // parts 1..4 only
    std::int64_t received_at_ms = 0;
    double elapsed_time_s = 0.0;
    int correctness = 0; // 0/1
    // derived
    int timeliness = 0;          // 1 iff elapsed <= time_limit(part, audio)
    double inactive_time_s = 0.0; // gap to previous interaction; 0 for the first
};

struct StudentTimeline {
    std::string student_id;
    std::vector<Interaction> interactions; // chronological
};

struct ExamLabel {
    std::string student_id;
    std::int64_t report_at_ms = 0;
    double score = 0.0; // 10..990
};

enum class TaskKind { exam_score, review_correctness };

struct TargetExercise {
    std::string exercise_id;
    int part = 0;
};

struct TaskInstance {
    std::string student_id;
    std::vector<Interaction> input;
    std::optional<TargetExercise> target; // present iff review task
    double label = 0.0;                   // score or 0/1
    TaskKind kind = TaskKind::exam_score;
};

struct FoldSplit {
    int fold_id = 0;
    std::set<std::string> train;
    std::set<std::string> validation;
    std::set<std::string> test;
};

/// Expert-recommended per-part response time limit in seconds.
inline double time_limit(int part, std::optional<double> audio_duration_s) {
    switch (part) {
        case 1:
        case 2:
        case 3:
        case 4:
            if (!audio_duration_s)
                throw DataError("time_limit: part " + std::to_string(part) +
                                " requires an audio duration");
            return *audio_duration_s + 8.0;
        case 5:
            return 25.0;
        case 6:
            return 50.0;
        case 7:
            return 55.0;
        default:
            throw DataError("time_limit: part must be 1..7, got " + std::to_string(part));
    }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, std::size_t line_no, const std::string& col) {
    double v = 0.0;
    const auto* first = s.data();
    const auto* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last)
        throw DataError("line " + std::to_string(line_no) + ": non-numeric value '" + s +
                        "' in column " + col);
    return v;
}

inline std::int64_t parse_int(const std::string& s, std::size_t line_no, const std::string& col) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw DataError("line " + std::to_string(line_no) + ": non-numeric value '" + s +
                        "' in column " + col);
    return v;
}

/// Shortest round-trip decimal representation, for byte-stable exports.
inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline void check_header(const std::vector<std::string>& got,
                         const std::vector<std::string>& expected, const std::string& what) {
    for (const auto& col : expected)
        if (std::find(got.begin(), got.end(), col) == got.end())
            throw DataError(what + ": missing column '" + col + "'");
    if (got != expected) {
        std::string want;
        for (const auto& c : expected) want += (want.empty() ? "" : ",") + c;
        throw DataError(what + ": header must be exactly '" + want + "'");
    }
}

} // namespace detail

inline const std::vector<std::string>& interaction_columns() {
    static const std::vector<std::string> cols{
        "student_id", "exercise_id", "part",           "audio_duration_s",
        "received_at_ms", "elapsed_time_s", "correctness"};
    return cols;
}

/// Derives timeliness and inactive gaps for an already-sorted timeline.
inline void derive_assessments(StudentTimeline& tl) {
    for (std::size_t i = 0; i < tl.interactions.size(); ++i) {
        Interaction& it = tl.interactions[i];
        it.timeliness = it.elapsed_time_s <= time_limit(it.part, it.audio_duration_s) ? 1 : 0;
        it.inactive_time_s =
            i == 0 ? 0.0
                   : static_cast<double>(it.received_at_ms - tl.interactions[i - 1].received_at_ms) /
                         1000.0;
    }
}

inline std::vector<StudentTimeline> parse_interactions(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("interactions: empty file");
    detail::check_header(detail::split_csv_line(line), interaction_columns(), "interactions");

    std::map<std::string, std::vector<Interaction>> by_student;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 7)
            throw DataError("line " + std::to_string(line_no) + ": expected 7 fields, got " +
                            std::to_string(f.size()));
        Interaction it;
        it.exercise_id = f[1];
        it.part = static_cast<int>(detail::parse_int(f[2], line_no, "part"));
        if (it.part < 1 || it.part > 7)
            throw DataError("line " + std::to_string(line_no) + ": part must be 1..7, got " +
                            f[2]);
        if (!f[3].empty()) it.audio_duration_s = detail::parse_double(f[3], line_no, "audio_duration_s");
        if ((it.part <= 4) != it.audio_duration_s.has_value())
            throw DataError("line " + std::to_string(line_no) +
                            ": audio_duration_s must be present exactly for parts 1-4");
        if (it.audio_duration_s && *it.audio_duration_s < 0.0)
            throw DataError("line " + std::to_string(line_no) + ": negative audio duration");
        it.received_at_ms = detail::parse_int(f[4], line_no, "received_at_ms");
        it.elapsed_time_s = detail::parse_double(f[5], line_no, "elapsed_time_s");
        if (it.elapsed_time_s < 0.0)
            throw DataError("line " + std::to_string(line_no) + ": negative elapsed time");
        const auto corr = detail::parse_int(f[6], line_no, "correctness");
        if (corr != 0 && corr != 1)
            throw DataError("line " + std::to_string(line_no) + ": correctness must be 0 or 1");
        it.correctness = static_cast<int>(corr);
        by_student[f[0]].push_back(std::move(it));
    }

    std::vector<StudentTimeline> out;
    out.reserve(by_student.size());
    for (auto& [sid, rows] : by_student) {
        StudentTimeline tl;
        tl.student_id = sid;
        tl.interactions = std::move(rows);
        std::stable_sort(tl.interactions.begin(), tl.interactions.end(),
                         [](const Interaction& a, const Interaction& b) {
                             return a.received_at_ms < b.received_at_ms;
                         });
        derive_assessments(tl);
        out.push_back(std::move(tl));
    }
    return out;
}

inline std::vector<StudentTimeline> parse_interactions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open interactions file: " + path);
    return parse_interactions(in);
}

inline void write_interactions(std::ostream& out, const std::vector<StudentTimeline>& timelines) {
    out << "student_id,exercise_id,part,audio_duration_s,received_at_ms,elapsed_time_s,correctness\n";
    std::vector<const StudentTimeline*> sorted;
    for (const auto& tl : timelines) sorted.push_back(&tl);
    std::sort(sorted.begin(), sorted.end(), [](const StudentTimeline* a, const StudentTimeline* b) {
        return a->student_id < b->student_id;
    });
    for (const StudentTimeline* tl : sorted) {
        for (const Interaction& it : tl->interactions) {
            out << tl->student_id << ',' << it.exercise_id << ',' << it.part << ','
                << (it.audio_duration_s ? detail::format_double(*it.audio_duration_s) : "") << ','
                << it.received_at_ms << ',' << detail::format_double(it.elapsed_time_s) << ','
                << it.correctness << '\n';
        }
    }
}

inline void write_interactions(const std::string& path,
                               const std::vector<StudentTimeline>& timelines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write interactions file: " + path);
    write_interactions(out, timelines);
}

inline std::vector<ExamLabel> parse_exam_labels(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("labels: empty file");
    detail::check_header(detail::split_csv_line(line), {"student_id", "report_at_ms", "score"},
                         "labels");
    std::vector<ExamLabel> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 3)
            throw DataError("line " + std::to_string(line_no) + ": expected 3 fields, got " +
                            std::to_string(f.size()));
        ExamLabel lbl;
        lbl.student_id = f[0];
        lbl.report_at_ms = detail::parse_int(f[1], line_no, "report_at_ms");
        lbl.score = detail::parse_double(f[2], line_no, "score");
        if (lbl.score < 10.0 || lbl.score > 990.0)
            throw DataError("line " + std::to_string(line_no) + ": score out of range [10,990]");
        out.push_back(std::move(lbl));
    }
    return out;
}

inline std::vector<ExamLabel> parse_exam_labels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open labels file: " + path);
    return parse_exam_labels(in);
}

inline void write_exam_labels(std::ostream& out, std::vector<ExamLabel> labels) {
    std::sort(labels.begin(), labels.end(), [](const ExamLabel& a, const ExamLabel& b) {
        return std::tie(a.student_id, a.report_at_ms) < std::tie(b.student_id, b.report_at_ms);
    });
    out << "student_id,report_at_ms,score\n";
    for (const ExamLabel& l : labels)
        out << l.student_id << ',' << l.report_at_ms << ',' << detail::format_double(l.score)
            << '\n';
}

inline void write_exam_labels(const std::string& path, const std::vector<ExamLabel>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write labels file: " + path);
    write_exam_labels(out, labels);
}

/// For each exercise answered at least twice, emits one instance built
/// from the first two occurrences i < j: the interactions strictly
/// between them form the input, the j-th correctness is the label.
inline std::vector<TaskInstance> extract_review_instances(const StudentTimeline& tl) {
    std::unordered_map<std::string, std::size_t> first_seen;
    std::unordered_set<std::string> emitted;
    std::vector<TaskInstance> out;
    for (std::size_t j = 0; j < tl.interactions.size(); ++j) {
        const Interaction& ij = tl.interactions[j];
        auto it = first_seen.find(ij.exercise_id);
        if (it == first_seen.end()) {
            first_seen.emplace(ij.exercise_id, j);
            continue;
        }
        if (emitted.count(ij.exercise_id)) continue;
        emitted.insert(ij.exercise_id);
        TaskInstance inst;
        inst.student_id = tl.student_id;
        inst.kind = TaskKind::review_correctness;
        inst.input.assign(tl.interactions.begin() + static_cast<std::ptrdiff_t>(it->second) + 1,
                          tl.interactions.begin() + static_cast<std::ptrdiff_t>(j));
        inst.target = TargetExercise{ij.exercise_id, ij.part};
        inst.label = ij.correctness;
        out.push_back(std::move(inst));
    }
    return out;
}

inline std::vector<TaskInstance> extract_review_instances(
    const std::vector<StudentTimeline>& timelines) {
    std::vector<TaskInstance> out;
    for (const auto& tl : timelines) {
        auto per = extract_review_instances(tl);
        out.insert(out.end(), per.begin(), per.end());
    }
    return out;
}

/// Pairs each score report with the student's most recent `window_len`
/// interactions before the report time.
inline std::vector<TaskInstance> build_exam_instances(
    const std::vector<StudentTimeline>& timelines, const std::vector<ExamLabel>& labels,
    std::size_t window_len) {
    std::unordered_map<std::string, const StudentTimeline*> by_id;
    for (const auto& tl : timelines) by_id.emplace(tl.student_id, &tl);
    std::vector<TaskInstance> out;
    for (const ExamLabel& lbl : labels) {
        TaskInstance inst;
        inst.student_id = lbl.student_id;
        inst.kind = TaskKind::exam_score;
        inst.label = lbl.score;
        auto it = by_id.find(lbl.student_id);
        if (it != by_id.end()) {
            const auto& ints = it->second->interactions;
            std::size_t end = 0;
            while (end < ints.size() && ints[end].received_at_ms < lbl.report_at_ms) ++end;
            const std::size_t start = end > window_len ? end - window_len : 0;
            inst.input.assign(ints.begin() + static_cast<std::ptrdiff_t>(start),
                              ints.begin() + static_cast<std::ptrdiff_t>(end));
        }
        out.push_back(std::move(inst));
    }
    return out;
}

/// Drops every timeline whose student appears in the labeled set, so the
/// pre-training corpus cannot leak downstream students.
inline std::vector<StudentTimeline> exclude_leakage(std::vector<StudentTimeline> timelines,
                                                    const std::set<std::string>& labeled_ids) {
    std::vector<StudentTimeline> out;
    out.reserve(timelines.size());
    for (auto& tl : timelines)
        if (!labeled_ids.count(tl.student_id)) out.push_back(std::move(tl));
    return out;
}

/// Five rotations over a seeded shuffle of the labeled students: fold k
/// tests on shard k, validates on shard (k+1) mod 5, trains on the rest.
inline std::vector<FoldSplit> split_folds(const std::vector<TaskInstance>& instances,
                                          std::uint64_t seed) {
    std::vector<std::string> students;
    std::set<std::string> seen;
    for (const auto& inst : instances)
        if (seen.insert(inst.student_id).second) students.push_back(inst.student_id);
    if (instances.size() < 5 || students.size() < 5)
        throw DataError("split_folds: need at least 5 instances from 5 distinct students, got " +
                        std::to_string(instances.size()) + " instances / " +
                        std::to_string(students.size()) + " students");
    std::sort(students.begin(), students.end());
    auto eng = rng::make_engine(seed, 0xF01D5);
    rng::shuffle(students, eng);

    const std::size_t n = students.size();
    std::vector<std::vector<std::string>> shards(5);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 5; ++k) {
        std::size_t size = n / 5 + (k < n % 5 ? 1 : 0);
        for (std::size_t i = 0; i < size; ++i) shards[k].push_back(students[pos++]);
    }

    std::vector<FoldSplit> out(5);
    for (int k = 0; k < 5; ++k) {
        out[k].fold_id = k;
        out[k].test.insert(shards[k].begin(), shards[k].end());
        const int v = (k + 1) % 5;
        out[k].validation.insert(shards[v].begin(), shards[v].end());
        for (int s = 0; s < 5; ++s)
            if (s != k && s != v) out[k].train.insert(shards[s].begin(), shards[s].end());
    }
    return out;
}

} // namespace amnet::dataio

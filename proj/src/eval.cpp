#include "mtcnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mtcnn {

std::vector<GroundTruth> parse_manifest(const std::string& text)
{
    std::vector<GroundTruth> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        std::istringstream ls(line);
        GroundTruth gt;
        ls >> gt.image;
        std::vector<float> nums;
        std::string tok;
        while (ls >> tok) {
            try {
                std::size_t used = 0;
                nums.push_back(std::stof(tok, &used));
                if (used != tok.size()) {
                    throw std::invalid_argument(tok);
                }
            } catch (const std::exception&) {
                throw std::runtime_error("manifest line " + std::to_string(lineno) + ": bad number '" + tok + "'");
            }
        }
        if (nums.size() % 4 != 0) {
            throw std::runtime_error("manifest line " + std::to_string(lineno) +
                                     ": coordinate count is not a multiple of 4");
        }
        for (std::size_t i = 0; i < nums.size(); i += 4) {
            const Box b{nums[i], nums[i + 1], nums[i + 2], nums[i + 3]};
            if (!b.valid()) {
                throw std::runtime_error("manifest line " + std::to_string(lineno) + ": invalid box");
            }
            gt.boxes.push_back(b);
        }
        out.push_back(std::move(gt));
    }
    return out;
}

std::vector<GroundTruth> read_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open manifest " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str());
}

std::string format_manifest(std::span<const GroundTruth> entries)
{
    std::string out;
    char buf[128];
    for (const auto& e : entries) {
        out += e.image;
        for (const auto& b : e.boxes) {
            std::snprintf(buf, sizeof buf, " %.9g %.9g %.9g %.9g", b.x1, b.y1, b.x2, b.y2);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

MatchCounts match_detections(std::span<const Detection> dets, std::span<const Box> truths, float iou_threshold)
{
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<char> taken(truths.size(), 0);
    MatchCounts m;
    for (std::size_t d : order) {
        float best = -1;
        std::size_t best_t = truths.size();
        for (std::size_t t = 0; t < truths.size(); ++t) {
            if (taken[t]) {
                continue;
            }
            const float o = iou(dets[d].box, truths[t]);
            if (o > best) {
                best = o;
                best_t = t;
            }
        }
        if (best_t < truths.size() && best >= iou_threshold) {
            taken[best_t] = 1;
            ++m.tp;
        } else {
            ++m.fp;
        }
    }
    m.fn = truths.size() - m.tp;
    return m;
}

void ConfusionMatrix::add_image(const MatchCounts& m, std::size_t truths, std::size_t dets)
{
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
    if (truths == 0 && dets == 0) {
        ++tn;
    }
}

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den)
{
    if (den == 0) {
        return std::nullopt;
    }
    return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport compute_metrics(const ConfusionMatrix& cm)
{
    MetricsReport r;
    r.precision = ratio(cm.tp, cm.tp + cm.fp);
    r.recall = ratio(cm.tp, cm.tp + cm.fn);
    // true specificity; the fraction of negatives rejected
    r.specificity = ratio(cm.tn, cm.tn + cm.fp);
    r.f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn);
    r.accuracy = ratio(cm.tp + cm.tn, cm.tp + cm.tn + cm.fp + cm.fn);
    return r;
}

namespace {

struct Field {
    const char* name;
    std::optional<double> MetricsReport::*member;
};

constexpr Field kFields[] = {
    {"precision", &MetricsReport::precision}, {"recall", &MetricsReport::recall},
    {"specificity", &MetricsReport::specificity}, {"f1", &MetricsReport::f1},
    {"accuracy", &MetricsReport::accuracy},
};

std::string fixed2(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

std::string metrics_csv(const MetricsReport& r)
{
    std::string head;
    std::string row;
    for (const auto& f : kFields) {
        if (!head.empty()) {
            head += ',';
            row += ',';
        }
        head += f.name;
        if (const auto& v = r.*f.member) {
            row += fixed2(*v);
        }
    }
    return head + "\n" + row + "\n";
}

std::string metrics_text(const MetricsReport& r)
{
    std::string out;
    char buf[64];
    for (const auto& f : kFields) {
        const auto& v = r.*f.member;
        if (v) {
            std::snprintf(buf, sizeof buf, "%-12s %.2f%%\n", f.name, *v);
        } else {
            std::snprintf(buf, sizeof buf, "%-12s undefined\n", f.name);
        }
        out += buf;
    }
    return out;
}

std::string format_percent(double value)
{
    std::string s = fixed2(value);
    while (s.back() == '0') {
        s.pop_back();
    }
    if (s.back() == '.') {
        s.pop_back();
    }
    return s + "%";
}

std::string compare_report(std::span<const NamedResult> results, ReportFormat format)
{
    const bool full = std::any_of(results.begin(), results.end(),
                                  [](const NamedResult& r) { return std::holds_alternative<MetricsReport>(r.value); });
    std::vector<std::string> header{"Algorithm"};
    if (full) {
        header.insert(header.end(), {"Precision", "Recall", "Specificity", "F1", "Accuracy"});
    } else {
        header.push_back("Accuracy");
    }
    std::vector<std::vector<std::string>> rows{header};
    for (const auto& r : results) {
        std::vector<std::string> row{r.detector};
        auto cell = [](const std::optional<double>& v) { return v ? format_percent(*v) : std::string("-"); };
        if (const auto* acc = std::get_if<double>(&r.value)) {
            if (full) {
                row.insert(row.end(), {"-", "-", "-", "-"});
            }
            row.push_back(format_percent(*acc));
        } else {
            const auto& m = std::get<MetricsReport>(r.value);
            row.insert(row.end(), {cell(m.precision), cell(m.recall), cell(m.specificity), cell(m.f1),
                                   cell(m.accuracy)});
        }
        rows.push_back(std::move(row));
    }

    std::string out;
    if (format == ReportFormat::Csv) {
        for (const auto& row : rows) {
            for (std::size_t c = 0; c < row.size(); ++c) {
                out += (c ? "," : "") + row[c];
            }
            out += '\n';
        }
        return out;
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            width[c] = std::max(width[c], row[c].size());
        }
    }
    for (const auto& row : rows) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c == 0) {
                line += row[c] + std::string(width[c] - row[c].size(), ' ');
            } else {
                // numbers right-aligned
                line += "  " + std::string(width[c] - row[c].size(), ' ') + row[c];
            }
        }
        while (!line.empty() && line.back() == ' ') {
            line.pop_back();
        }
        out += line + '\n';
    }
    return out;
}

}  // namespace mtcnn

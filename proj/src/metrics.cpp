#include "lvseg/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace lvseg::metrics {
using nlohmann::json;

namespace {

void require_same(const Mask& a, const Mask& b) {
    if (!a.same_shape(b))
        throw Error("mask size mismatch: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                    std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

double mean_nearest(const Contour& from, const Image& dist2) {
    double s = 0.0;
    for (const Point& p : from) s += std::sqrt(dist2(p.row, p.col));
    return s / static_cast<double>(from.size());
}

// JSON has no infinities; they travel as strings.
json number(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

double from_number(const json& j) {
    if (j.is_number()) return j.get<double>();
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
}

json summary_json(const Summary& s) { return {{"mean", number(s.mean)}, {"std", number(s.stddev)}}; }

Summary summary_from(const json& j) { return {from_number(j.at("mean")), from_number(j.at("std"))}; }

}  // namespace

double dice(const Mask& a, const Mask& b) {
    require_same(a, b);
    long na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] ? 1 : 0;
        nb += b[i] ? 1 : 0;
        both += (a[i] && b[i]) ? 1 : 0;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

Contour extract_contour(const Mask& mask) {
    Contour out;
    for (int r = 0; r < mask.rows(); ++r) {
        for (int c = 0; c < mask.cols(); ++c) {
            if (!mask(r, c)) continue;
            bool edge = false;
            for (int dr = -1; dr <= 1 && !edge; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    if (dr == 0 && dc == 0) continue;
                    const int rr = r + dr, cc = c + dc;
                    if (!mask.contains(rr, cc) || !mask(rr, cc)) {
                        edge = true;
                        break;
                    }
                }
            }
            if (edge) out.push_back({r, c});
        }
    }
    return out;
}

Image squared_distance_map(const Contour& contour, int rows, int cols, const PixelSpacing& spacing) {
    const double inf = std::numeric_limits<double>::infinity();
    // Separable exact transform: nearest contour row within each column, then
    // an exhaustive minimum along each row.
    Grid<int> hit(rows, cols, 0);
    for (const Point& p : contour) hit(p.row, p.col) = 1;
    Image column_d2(rows, cols, inf);
    std::vector<int> nearest(static_cast<std::size_t>(rows));
    for (int c = 0; c < cols; ++c) {
        int last = -1;
        for (int r = 0; r < rows; ++r) {
            if (hit(r, c)) last = r;
            nearest[static_cast<std::size_t>(r)] = last < 0 ? -1 : r - last;
        }
        last = -1;
        for (int r = rows - 1; r >= 0; --r) {
            if (hit(r, c)) last = r;
            if (last < 0) continue;
            int& n = nearest[static_cast<std::size_t>(r)];
            if (n < 0 || last - r < n) n = last - r;
        }
        for (int r = 0; r < rows; ++r) {
            const int n = nearest[static_cast<std::size_t>(r)];
            if (n < 0) continue;
            const double dy = n * spacing.row_mm;
            column_d2(r, c) = dy * dy;
        }
    }
    Image out(rows, cols, inf);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double best = inf;
            for (int q = 0; q < cols; ++q) {
                const double f = column_d2(r, q);
                if (f == inf) continue;
                const double dx = (c - q) * spacing.col_mm;
                best = std::min(best, f + dx * dx);
            }
            out(r, c) = best;
        }
    }
    return out;
}

double apd(const Mask& pred, const Mask& truth, const PixelSpacing& spacing, const ApdOptions& opts) {
    require_same(pred, truth);
    const Contour cp = extract_contour(pred);
    const Contour ct = extract_contour(truth);
    if (cp.empty() && ct.empty()) return 0.0;
    if (cp.empty() || ct.empty()) {
        if (opts.empty_penalty_mm) return *opts.empty_penalty_mm;
        return std::hypot(pred.rows() * spacing.row_mm, pred.cols() * spacing.col_mm);
    }
    const double forward = mean_nearest(cp, squared_distance_map(ct, pred.rows(), pred.cols(), spacing));
    if (opts.one_directional) return forward;
    const double backward = mean_nearest(ct, squared_distance_map(cp, pred.rows(), pred.cols(), spacing));
    return 0.5 * (forward + backward);
}

double conformity(double d) {
    if (d == 0.0) return -std::numeric_limits<double>::infinity();
    return (3.0 * d - 2.0) / d;
}

Summary summarize(const std::vector<double>& values) {
    if (values.empty()) return {};
    double m = 0.0;
    for (double v : values) m += v;
    m /= static_cast<double>(values.size());
    if (!std::isfinite(m)) return {m, std::numeric_limits<double>::quiet_NaN()};
    double s = 0.0;
    for (double v : values) s += (v - m) * (v - m);
    return {m, std::sqrt(s / static_cast<double>(values.size()))};
}

std::string format_cell(const Summary& s) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.4f(%.4f)", s.mean, s.stddev);
    return buf;
}

MetricReport evaluate_sequence(const MaskSequence& pred, const MaskSequence& truth, const PixelSpacing& spacing,
                               const ApdOptions& opts) {
    if (pred.length() != truth.length()) throw Error("prediction and reference sequences differ in length");
    MetricReport r;
    for (int t = 0; t < pred.length(); ++t) {
        const Mask& p = pred.masks[static_cast<std::size_t>(t)];
        const Mask& g = truth.masks[static_cast<std::size_t>(t)];
        const double d = dice(p, g);
        r.dice.push_back(d);
        r.apd_mm.push_back(apd(p, g, spacing, opts));
        r.conformity.push_back(conformity(d));
    }
    r.dice_summary = summarize(r.dice);
    r.apd_summary = summarize(r.apd_mm);
    r.conformity_summary = summarize(r.conformity);
    return r;
}

AggregateReport aggregate(const std::string& label, const std::vector<MetricReport>& reports) {
    AggregateReport a;
    a.label = label;
    a.subjects = static_cast<int>(reports.size());
    std::vector<double> d, p, c, sd, sp, sc;
    for (const auto& r : reports) {
        d.insert(d.end(), r.dice.begin(), r.dice.end());
        p.insert(p.end(), r.apd_mm.begin(), r.apd_mm.end());
        c.insert(c.end(), r.conformity.begin(), r.conformity.end());
        sd.push_back(r.dice_summary.mean);
        sp.push_back(r.apd_summary.mean);
        sc.push_back(r.conformity_summary.mean);
    }
    a.frames = static_cast<int>(d.size());
    a.dice = summarize(d);
    a.apd_mm = summarize(p);
    a.conformity = summarize(c);
    a.subject_dice = summarize(sd);
    a.subject_apd_mm = summarize(sp);
    a.subject_conformity = summarize(sc);
    return a;
}

std::string format_table(const std::vector<AggregateReport>& rows) {
    std::size_t w0 = std::string("Algorithms").size();
    for (const auto& r : rows) w0 = std::max(w0, r.label.size());
    std::vector<std::array<std::string, 3>> cells;
    std::array<std::size_t, 3> w = {std::string("DICE (%)").size(), std::string("APD (mm)").size(),
                                    std::string("C(%)").size()};
    for (const auto& r : rows) {
        cells.push_back({format_cell(r.dice), format_cell(r.apd_mm), format_cell(r.conformity)});
        for (int k = 0; k < 3; ++k) w[static_cast<std::size_t>(k)] = std::max(w[static_cast<std::size_t>(k)], cells.back()[static_cast<std::size_t>(k)].size());
    }
    std::ostringstream os;
    auto line = [&](const std::string& a, const std::string& b, const std::string& c, const std::string& d) {
        os << "| " << a << std::string(w0 - a.size(), ' ') << " | " << b << std::string(w[0] - b.size(), ' ') << " | "
           << c << std::string(w[1] - c.size(), ' ') << " | " << d << std::string(w[2] - d.size(), ' ') << " |\n";
    };
    line("Algorithms", "DICE (%)", "APD (mm)", "C(%)");
    os << '|' << std::string(w0 + 2, '-') << '|' << std::string(w[0] + 2, '-') << '|' << std::string(w[1] + 2, '-')
       << '|' << std::string(w[2] + 2, '-') << "|\n";
    for (std::size_t i = 0; i < rows.size(); ++i) line(rows[i].label, cells[i][0], cells[i][1], cells[i][2]);
    return os.str();
}

std::string to_json(const MetricReport& r) {
    json per_frame = json::array();
    for (std::size_t t = 0; t < r.dice.size(); ++t)
        per_frame.push_back({{"frame", t},
                             {"dice", number(r.dice[t])},
                             {"apd_mm", number(r.apd_mm[t])},
                             {"conformity", number(r.conformity[t])}});
    json j = {{"subject", r.subject_id},
              {"frames", per_frame},
              {"dice", summary_json(r.dice_summary)},
              {"apd_mm", summary_json(r.apd_summary)},
              {"conformity", summary_json(r.conformity_summary)}};
    return j.dump(2);
}

std::string to_json(const AggregateReport& a) {
    json j = {{"label", a.label},
              {"subjects", a.subjects},
              {"frames", a.frames},
              {"per_frame",
               {{"dice", summary_json(a.dice)}, {"apd_mm", summary_json(a.apd_mm)}, {"conformity", summary_json(a.conformity)}}},
              {"per_subject",
               {{"dice", summary_json(a.subject_dice)},
                {"apd_mm", summary_json(a.subject_apd_mm)},
                {"conformity", summary_json(a.subject_conformity)}}}};
    return j.dump(2);
}

AggregateReport aggregate_from_json(const std::string& text) {
    AggregateReport a;
    try {
        const json j = json::parse(text);
        a.label = j.at("label").get<std::string>();
        a.subjects = j.at("subjects").get<int>();
        a.frames = j.at("frames").get<int>();
        const auto& f = j.at("per_frame");
        a.dice = summary_from(f.at("dice"));
        a.apd_mm = summary_from(f.at("apd_mm"));
        a.conformity = summary_from(f.at("conformity"));
        const auto& s = j.at("per_subject");
        a.subject_dice = summary_from(s.at("dice"));
        a.subject_apd_mm = summary_from(s.at("apd_mm"));
        a.subject_conformity = summary_from(s.at("conformity"));
    } catch (const json::exception& e) {
        throw Error(std::string("malformed metric report: ") + e.what());
    }
    return a;
}

}  // namespace lvseg::metrics

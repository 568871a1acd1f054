#include "flowcast/dataflow.hpp"

#include "flowcast/errors.hpp"
#include "flowcast/util.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

namespace flowcast {

using util::KeyValueFile;
using util::format_double;
using util::read_file;
using util::split;
using util::trim;
using util::write_file_atomic;

namespace {

constexpr const char* kCsvHeader = "timestamp,subway,taxi,bus";
constexpr const char* kWeekdayNames[8] = {"", "Monday", "Tuesday", "Wednesday",
                                          "Thursday", "Friday", "Saturday", "Sunday"};

std::chrono::year_month_day to_ymd(std::int64_t day) {
    return std::chrono::year_month_day{std::chrono::sys_days{std::chrono::days{day}}};
}

long long parse_count(std::string_view field, std::size_t line_no) {
    std::string t = trim(std::string(field));
    long long v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || ptr != t.data() + t.size())
        throw DataError("line " + std::to_string(line_no) + ": malformed count '" + t + "'");
    if (v < 0)
        throw DataError("line " + std::to_string(line_no) + ": negative count " + std::to_string(v));
    return v;
}

/// Parses "YYYY-MM-DD[T ]HH:MM[:SS]" and returns (day, minute-of-day).
std::pair<std::int64_t, int> parse_timestamp(std::string_view ts, std::size_t line_no) {
    auto fail = [&](const std::string& why) -> void {
        throw DataError("line " + std::to_string(line_no) + ": malformed timestamp '" +
                        std::string(ts) + "' (" + why + ")");
    };
    int y = 0, mo = 0, d = 0, hh = 0, mi = 0, ss = 0;
    char sep = 0;
    int consumed = 0;
    int n = std::sscanf(std::string(ts).c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &y, &mo, &d, &sep, &hh, &mi, &consumed);
    if (n != 6 || (sep != 'T' && sep != ' ')) fail("expected YYYY-MM-DDTHH:MM");
    std::string_view rest = ts.substr(static_cast<std::size_t>(consumed));
    if (!rest.empty()) {
        if (rest.size() != 3 || rest[0] != ':' || std::sscanf(std::string(rest).c_str(), ":%2d", &ss) != 1)
            fail("trailing characters");
        if (ss != 0) fail("timestamps must be 30-minute aligned");
    }
    std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(mo)},
                                    std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) fail("invalid calendar date");
    if (hh > 23 || mi > 59) fail("invalid time of day");
    if (mi != 0 && mi != 30) fail("timestamps must be 30-minute aligned");
    std::int64_t day = std::chrono::sys_days{ymd}.time_since_epoch().count();
    return {day, hh * 60 + mi};
}

} // namespace

int iso_weekday(std::int64_t day) {
    std::chrono::weekday wd{std::chrono::sys_days{std::chrono::days{day}}};
    return static_cast<int>(wd.iso_encoding());
}

bool is_weekday(std::int64_t day) { return iso_weekday(day) <= 5; }

std::string format_slot(const SlotKey& key) {
    auto ymd = to_ymd(key.day);
    int minute = kFirstSlotMinute + key.slot * 30;
    char buf[48];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d %02d:%02d (slot %d)",
                  static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()), minute / 60, minute % 60, key.slot);
    return buf;
}

FlowSeries load_csv(const std::string& path, std::size_t* dropped_rows) {
    std::string text = read_file(path);
    std::size_t dropped = 0;

    std::map<SlotKey, std::array<double, kModes>> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        if (!saw_header) {
            if (trim(line) != kCsvHeader)
                throw DataError(path + ": expected header '" + std::string(kCsvHeader) + "', got '" + line + "'");
            saw_header = true;
            continue;
        }
        std::vector<std::string> fields = split(line, ',');
        if (fields.size() != 4)
            throw DataError("line " + std::to_string(line_no) + ": expected 4 fields, got " +
                            std::to_string(fields.size()));
        auto [day, minute] = parse_timestamp(trim(fields[0]), line_no);
        int slot_minute = minute - kFirstSlotMinute;
        if (slot_minute < 0 || slot_minute >= kSlotsPerDay * 30) {
            ++dropped; // outside the 05:00-23:00 service window
            continue;
        }
        SlotKey key{day, slot_minute / 30};
        std::array<double, kModes> v{};
        for (int m = 0; m < kModes; ++m)
            v[m] = static_cast<double>(parse_count(fields[1 + m], line_no));
        if (!rows.emplace(key, v).second)
            throw DataError("duplicate timestamp at " + format_slot(key));
    }
    if (!saw_header) throw DataError(path + ": empty file");
    if (rows.empty()) throw DataError(path + ": no rows inside the 05:00-23:00 service window");

    FlowSeries series;
    series.region_label = std::filesystem::path(path).stem().string();
    std::vector<std::int64_t> days;
    for (const auto& [key, _] : rows)
        if (days.empty() || days.back() != key.day) days.push_back(key.day);
    for (std::int64_t day : days) {
        for (int slot = 0; slot < kSlotsPerDay; ++slot) {
            SlotKey key{day, slot};
            auto it = rows.find(key);
            series.slots.push_back(key);
            if (it == rows.end()) {
                series.values.push_back({0.0, 0.0, 0.0});
                series.missing.push_back({true, true, true});
            } else {
                series.values.push_back(it->second);
                series.missing.push_back({false, false, false});
            }
        }
    }
    if (dropped_rows) *dropped_rows = dropped;
    return series;
}

void write_csv(const FlowSeries& series, const std::string& path) {
    std::string out(kCsvHeader);
    out += '\n';
    char buf[96];
    for (std::size_t i = 0; i < series.size(); ++i) {
        bool any_missing = series.missing[i][0] || series.missing[i][1] || series.missing[i][2];
        if (any_missing) continue;
        auto ymd = to_ymd(series.slots[i].day);
        int minute = kFirstSlotMinute + series.slots[i].slot * 30;
        std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d,%lld,%lld,%lld\n",
                      static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                      static_cast<unsigned>(ymd.day()), minute / 60, minute % 60,
                      static_cast<long long>(std::llround(series.values[i][0])),
                      static_cast<long long>(std::llround(series.values[i][1])),
                      static_cast<long long>(std::llround(series.values[i][2])));
        out += buf;
    }
    write_file_atomic(path, out);
}

FlowSeries filter_weekdays(const FlowSeries& series) {
    FlowSeries out;
    out.region_label = series.region_label;
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (!is_weekday(series.slots[i].day)) continue;
        out.slots.push_back(series.slots[i]);
        out.values.push_back(series.values[i]);
        out.missing.push_back(series.missing[i]);
    }
    if (out.slots.empty()) throw DataError("no weekday data after filtering");
    return out;
}

FlowSeries impute_missing(const FlowSeries& series) {
    FlowSeries out = series;
    // donor pool: same weekday, same slot, other (non-missing) weeks
    std::unordered_map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < series.size(); ++i)
        groups[iso_weekday(series.slots[i].day) * kSlotsPerDay + series.slots[i].slot].push_back(i);

    for (std::size_t i = 0; i < series.size(); ++i) {
        for (int m = 0; m < kModes; ++m) {
            if (!series.missing[i][m]) continue;
            const auto& pool = groups[iso_weekday(series.slots[i].day) * kSlotsPerDay + series.slots[i].slot];
            double sum = 0.0;
            std::size_t count = 0;
            for (std::size_t j : pool) {
                if (j == i || series.missing[j][m]) continue;
                sum += series.values[j][m];
                ++count;
            }
            if (count == 0)
                throw DataError("imputation: no donor for " + std::string(kModeNames[m]) + " on " +
                                kWeekdayNames[iso_weekday(series.slots[i].day)] + " at " +
                                format_slot(series.slots[i]));
            out.values[i][m] = sum / static_cast<double>(count);
            out.missing[i][m] = false;
        }
    }
    return out;
}

NormalizationParams fit_normalization(const FlowSeries& series, std::size_t begin, std::size_t end) {
    if (begin >= end || end > series.size())
        throw ConfigError("fit_normalization: empty or out-of-range slot range");
    NormalizationParams p;
    for (int m = 0; m < kModes; ++m) {
        double lo = series.values[begin][m], hi = lo;
        for (std::size_t i = begin; i < end; ++i) {
            if (series.missing[i][m])
                throw DataError("fit_normalization: missing value at " + format_slot(series.slots[i]) +
                                " — impute first");
            lo = std::min(lo, series.values[i][m]);
            hi = std::max(hi, series.values[i][m]);
        }
        if (!(hi > lo))
            throw DataError("fit_normalization: " + std::string(kModeNames[m]) +
                            " is constant over the fitted range (min == max == " + format_double(lo) + ")");
        p.min[m] = lo;
        p.max[m] = hi;
    }
    return p;
}

double normalize_value(double v, const NormalizationParams& p, int mode) {
    return 2.0 * (v - p.min[mode]) / (p.max[mode] - p.min[mode]) - 1.0;
}

double denormalize_value(double v, const NormalizationParams& p, int mode) {
    return p.min[mode] + (v + 1.0) * (p.max[mode] - p.min[mode]) / 2.0;
}

std::array<double, kModes> denormalize(const std::array<double, kModes>& v, const NormalizationParams& p) {
    std::array<double, kModes> out{};
    for (int m = 0; m < kModes; ++m) out[m] = denormalize_value(v[m], p, m);
    return out;
}

FlowSeries normalize(const FlowSeries& series, const NormalizationParams& p) {
    FlowSeries out = series;
    for (std::size_t i = 0; i < series.size(); ++i)
        for (int m = 0; m < kModes; ++m)
            out.values[i][m] = normalize_value(series.values[i][m], p, m);
    return out;
}

namespace {

/// Start indices of complete 36-slot days; throws on partial days.
std::vector<std::size_t> day_starts(const FlowSeries& series) {
    std::vector<std::size_t> starts;
    std::size_t i = 0;
    while (i < series.size()) {
        std::int64_t day = series.slots[i].day;
        for (int slot = 0; slot < kSlotsPerDay; ++slot) {
            std::size_t j = i + static_cast<std::size_t>(slot);
            if (j >= series.size() || series.slots[j].day != day || series.slots[j].slot != slot)
                throw DataError("incomplete day " + format_slot({day, 0}) + ": expected all 36 slots");
        }
        starts.push_back(i);
        i += kSlotsPerDay;
    }
    return starts;
}

struct SplitCounts {
    std::size_t train, validation, test;
};

SplitCounts split_counts(std::size_t n, const SplitRatios& r) {
    if (!(r.train > 0.0) || !(r.validation > 0.0) || !(r.test > 0.0))
        throw ConfigError("split ratios must all be positive");
    if (std::fabs(r.train + r.validation + r.test - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");
    SplitCounts c;
    c.train = static_cast<std::size_t>(std::floor(r.train * static_cast<double>(n)));
    c.validation = static_cast<std::size_t>(std::floor(r.validation * static_cast<double>(n)));
    c.test = static_cast<std::size_t>(std::floor(r.test * static_cast<double>(n)));
    c.train += n - (c.train + c.validation + c.test); // remainder joins train
    if (c.train == 0 || c.validation == 0 || c.test == 0)
        throw ConfigError("split of " + std::to_string(n) + " samples leaves an empty part");
    return c;
}

} // namespace

std::vector<Sample> sliding_window(const FlowSeries& series, std::size_t window) {
    if (window < 1 || window >= kSlotsPerDay)
        throw ConfigError("window length must be in [1, 35], got " + std::to_string(window));
    std::vector<Sample> samples;
    for (std::size_t start : day_starts(series)) {
        for (std::size_t t = window; t < kSlotsPerDay; ++t) {
            Sample s;
            s.x.resize(kModes * window);
            for (int m = 0; m < kModes; ++m)
                for (std::size_t c = 0; c < window; ++c) {
                    std::size_t j = start + t - window + c;
                    if (series.missing[j][m])
                        throw DataError("sliding_window: missing value at " + format_slot(series.slots[j]) +
                                        " — impute first");
                    s.x[m * window + c] = series.values[j][m];
                }
            for (int m = 0; m < kModes; ++m) s.y[m] = series.values[start + t][m];
            s.target_slot = series.slots[start + t];
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

DatasetSplit chronological_split(std::vector<Sample> samples, const SplitRatios& ratios) {
    std::stable_sort(samples.begin(), samples.end(),
                     [](const Sample& a, const Sample& b) { return a.target_slot < b.target_slot; });
    SplitCounts c = split_counts(samples.size(), ratios);
    DatasetSplit split;
    auto it = samples.begin();
    split.train.assign(std::make_move_iterator(it), std::make_move_iterator(it + c.train));
    it += c.train;
    split.validation.assign(std::make_move_iterator(it), std::make_move_iterator(it + c.validation));
    it += c.validation;
    split.test.assign(std::make_move_iterator(it), std::make_move_iterator(it + c.test));
    return split;
}

DatasetSplit make_dataset(const FlowSeries& series, std::size_t window, const SplitRatios& ratios) {
    if (window < 1 || window >= kSlotsPerDay)
        throw ConfigError("window length must be in [1, 35], got " + std::to_string(window));
    std::size_t days = day_starts(series).size();
    std::size_t per_day = kSlotsPerDay - window;
    SplitCounts c = split_counts(days * per_day, ratios);

    // normalization sees only slots up to the last training target
    std::size_t last_train = c.train - 1;
    std::size_t boundary = (last_train / per_day) * kSlotsPerDay + window + last_train % per_day;
    NormalizationParams params = fit_normalization(series, 0, boundary + 1);

    DatasetSplit split = chronological_split(sliding_window(normalize(series, params), window), ratios);
    split.norm = params;
    split.window = window;
    return split;
}

SynthConfig SynthConfig::from_file(const std::string& path) {
    return from_string(read_file(path));
}

SynthConfig SynthConfig::from_string(const std::string& text) {
    KeyValueFile kv = KeyValueFile::parse_string(text);
    SynthConfig cfg;
    for (int m = 0; m < kModes; ++m) {
        const std::string prefix(kModeNames[m]);
        SynthModeConfig& mode = cfg.modes[m];
        mode.base = kv.get_double(prefix + ".base", mode.base);
        mode.amplitude = kv.get_double(prefix + ".amplitude", mode.amplitude);
        mode.morning_center = kv.get_double(prefix + ".morning", mode.morning_center);
        mode.evening_center = kv.get_double(prefix + ".evening", mode.evening_center);
        mode.width = kv.get_double(prefix + ".width", mode.width);
    }
    cfg.noise = kv.get_double("noise", cfg.noise);
    cfg.weekdays = static_cast<std::size_t>(kv.get_int("weekdays", static_cast<long long>(cfg.weekdays)));
    cfg.region_label = kv.get_or("region", cfg.region_label);
    if (auto date = kv.get("start_date")) {
        auto [day, minute] = parse_timestamp(*date + "T00:00", 0);
        (void)minute;
        cfg.start_day = day;
    }
    if (auto extra = kv.unconsumed(); !extra.empty())
        throw ConfigError("unknown synth config key '" + extra.front() + "'");
    return cfg;
}

FlowSeries synthesize(const SynthConfig& config, std::uint64_t seed) {
    for (int m = 0; m < kModes; ++m) {
        if (!(config.modes[m].width > 0.0))
            throw ConfigError(std::string("synthesize: ") + kModeNames[m] + " width must be positive");
        if (!(config.modes[m].amplitude > 0.0))
            throw ConfigError(std::string("synthesize: ") + kModeNames[m] + " amplitude must be positive");
        if (config.modes[m].base < 0.0)
            throw ConfigError(std::string("synthesize: ") + kModeNames[m] + " base must be non-negative");
    }
    if (config.noise < 0.0) throw ConfigError("synthesize: noise must be non-negative");
    if (config.weekdays == 0) throw ConfigError("synthesize: weekdays must be positive");

    auto bump = [](double s, double center, double width) {
        double z = (s - center) / width;
        return std::exp(-0.5 * z * z);
    };

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    FlowSeries series;
    series.region_label = config.region_label;
    std::int64_t day = config.start_day;
    for (std::size_t d = 0; d < config.weekdays; ++d) {
        while (!is_weekday(day)) ++day;
        for (int slot = 0; slot < kSlotsPerDay; ++slot) {
            std::array<double, kModes> v{};
            for (int m = 0; m < kModes; ++m) {
                const SynthModeConfig& mc = config.modes[m];
                double mean = mc.base + mc.amplitude * (bump(slot, mc.morning_center, mc.width) +
                                                        bump(slot, mc.evening_center, mc.width));
                double noisy = mean + config.noise * gauss(rng);
                v[m] = static_cast<double>(std::max<long long>(0, std::llround(noisy)));
            }
            series.slots.push_back({day, slot});
            series.values.push_back(v);
            series.missing.push_back({false, false, false});
        }
        ++day;
    }
    return series;
}

} // namespace flowcast

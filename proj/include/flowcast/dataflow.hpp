#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace flowcast {

inline constexpr int kSlotsPerDay = 36;      // 05:00-23:00 in 30-minute slots
inline constexpr int kFirstSlotMinute = 300; // 05:00
inline constexpr int kModes = 3;             // subway, taxi, bus
inline constexpr const char* kModeNames[kModes] = {"subway", "taxi", "bus"};

/// Calendar day (days since 1970-01-01) plus intra-day slot index.
struct SlotKey {
    std::int64_t day = 0;
    int slot = 0;

    friend bool operator==(const SlotKey&, const SlotKey&) = default;
    friend auto operator<=>(const SlotKey&, const SlotKey&) = default;
};

int iso_weekday(std::int64_t day);          // 1 = Monday .. 7 = Sunday
bool is_weekday(std::int64_t day);
std::string format_slot(const SlotKey& key); // "2016-02-29 05:30 (slot 1)"

struct FlowSeries {
    std::string region_label;
    std::vector<SlotKey> slots; // strictly increasing
    std::vector<std::array<double, kModes>> values;
    std::vector<std::array<bool, kModes>> missing;

    std::size_t size() const { return slots.size(); }
};

struct NormalizationParams {
    std::array<double, kModes> min{};
    std::array<double, kModes> max{};
};

struct Sample {
    std::vector<double> x; // row-major 3xL, rows (subway, taxi, bus)
    std::array<double, kModes> y{};
    SlotKey target_slot;
};

struct SplitRatios {
    double train = 0.7;
    double validation = 0.1;
    double test = 0.2;
};

struct DatasetSplit {
    std::vector<Sample> train;
    std::vector<Sample> validation;
    std::vector<Sample> test;
    NormalizationParams norm;
    std::size_t window = 0;
};

/// Reads `timestamp,subway,taxi,bus` rows, drops rows outside 05:00-22:30
/// slot starts (counted via dropped_rows when given), and materialises all 36
/// slots of every day that appears, flagging absent ones as missing.
FlowSeries load_csv(const std::string& path, std::size_t* dropped_rows = nullptr);
void write_csv(const FlowSeries& series, const std::string& path);

FlowSeries filter_weekdays(const FlowSeries& series);

/// Replaces each missing cell by the mean over the same weekday and slot in
/// other weeks for that mode.
FlowSeries impute_missing(const FlowSeries& series);

/// Fits per-mode min/max over slots [begin, end) of the series.
NormalizationParams fit_normalization(const FlowSeries& series, std::size_t begin, std::size_t end);
FlowSeries normalize(const FlowSeries& series, const NormalizationParams& params);
double normalize_value(double v, const NormalizationParams& params, int mode);
double denormalize_value(double v, const NormalizationParams& params, int mode);
std::array<double, kModes> denormalize(const std::array<double, kModes>& v, const NormalizationParams& params);

/// Day-bounded windows: every complete 36-slot day yields 36-L samples with
/// X columns at slots t-L..t-1 and y at slot t.
std::vector<Sample> sliding_window(const FlowSeries& series, std::size_t window);

DatasetSplit chronological_split(std::vector<Sample> samples, const SplitRatios& ratios);

/// Full pipeline on a cleaned (weekday-filtered, imputed) series: locate the
/// chronological split boundary, fit normalization on the training range
/// only, normalize, window, split.
DatasetSplit make_dataset(const FlowSeries& series, std::size_t window, const SplitRatios& ratios);

struct SynthModeConfig {
    double base = 0.0;
    double amplitude = 0.0;
    double morning_center = 0.0; // slot index
    double evening_center = 0.0;
    double width = 0.0; // gaussian sigma, in slots
};

struct SynthConfig {
    std::array<SynthModeConfig, kModes> modes = {{
        {200.0, 1800.0, 6.0, 25.0, 2.5},  // subway
        {150.0, 700.0, 7.0, 26.0, 3.75},  // taxi: +1 slot, width x1.5
        {100.0, 500.0, 6.0, 25.0, 2.5},   // bus
    }};
    double noise = 25.0;
    std::size_t weekdays = 25;
    std::string region_label = "synthetic-hub";
    std::int64_t start_day = 16860; // 2016-02-29, a Monday

    static SynthConfig from_file(const std::string& path);
    static SynthConfig from_string(const std::string& text);
};

/// Two gaussian bumps per mode per weekday plus gaussian noise, rounded and
/// clamped to non-negative counts. Deterministic for a fixed seed.
FlowSeries synthesize(const SynthConfig& config, std::uint64_t seed);

} // namespace flowcast

#pragma once

#include "ensdown/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace ensdown {

// ---------------------------------------------------------------------------
// 365-day ("noleap") calendar. Days are counted from 0000-01-01.

using DayIndex = std::int64_t;

inline constexpr int kDaysPerYear = 365;

struct Date {
    int year = 0;
    int month = 1; // 1..12
    int day = 1;   // 1..days_in_month

    friend bool operator==(const Date&, const Date&) = default;
};

int days_in_month(int month);
DayIndex day_index(int year, int month, int day);
DayIndex day_index(const Date& date);
Date date_of(DayIndex day);
inline int year_of(DayIndex day) { return static_cast<int>(day / kDaysPerYear); }
int month_of(DayIndex day);
/// 0-based day within the year.
inline int day_of_year(DayIndex day) { return static_cast<int>(day % kDaysPerYear); }

std::string format_date(const Date& date);
Date parse_date(const std::string& text);

/// Inclusive range of years, optionally restricted to a set of months.
struct PeriodSpec {
    int start_year = 0;
    int end_year = 0;
    std::set<int> months; // empty = every month

    PeriodSpec() = default;
    PeriodSpec(int start, int end, std::set<int> months_filter = {});

    bool contains(DayIndex day) const;
    /// "2006-2040", with the month list appended when filtered.
    std::string label() const;
    std::size_t day_count() const;

    static PeriodSpec parse(const std::string& text);

    friend bool operator==(const PeriodSpec&, const PeriodSpec&) = default;
};

inline const std::set<int> kSummerMonths{6, 7, 8};

// ---------------------------------------------------------------------------

/// Daily gridded field, values laid out [T, C, H, W].
struct GridField {
    Tensor values;
    std::vector<std::string> variables;
    std::vector<std::string> units;
    std::vector<double> lat;
    std::vector<double> lon;
    std::vector<DayIndex> time;
    std::map<std::string, std::string> attributes;

    std::size_t steps() const { return values.dim(0); }
    std::size_t channels() const { return values.dim(1); }
    std::size_t height() const { return values.dim(2); }
    std::size_t width() const { return values.dim(3); }
    std::size_t step_size() const { return channels() * height() * width(); }

    /// Throws ShapeError/ValueError when metadata and values disagree.
    void validate() const;

    /// Time steps `indices` (in the given order) as a new field.
    GridField take(const std::vector<std::size_t>& indices) const;

    /// Values as [T, C*H*W].
    Tensor as_matrix() const;
};

/// Time steps inside `period`. Throws ValueError when the period reaches
/// outside the field's calendar or selects nothing.
GridField select_period(const GridField& field, const PeriodSpec& period);

/// Restricts both fields to their common time steps.
std::pair<GridField, GridField> align_time(const GridField& a, const GridField& b);

/// Calendar made of `count` consecutive days starting at `start`.
std::vector<DayIndex> daily_calendar(const Date& start, std::size_t count);
std::vector<DayIndex> daily_calendar(int start_year, int end_year);

/// Evenly spaced coordinate vector, cell centers between lo and hi.
std::vector<double> cell_centers(double lo, double hi, std::size_t n);

// ---------------------------------------------------------------------------
// Binary grid file: magic, byte-order marker, length-prefixed JSON header,
// little-endian float64 payload in [T,C,H,W] order.

inline constexpr const char* kGridMagic = "ENSDOWN-GRID-v1";

std::string encode_grid(const GridField& field);
GridField decode_grid(std::string_view bytes);
void save_grid(const GridField& field, const std::filesystem::path& path);
GridField load_grid(const std::filesystem::path& path);

} // namespace ensdown

#include "ensdown/grid.hpp"

#include "ensdown/error.hpp"
#include "ensdown/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>

namespace ensdown {

namespace {

constexpr std::array<int, 12> kMonthLengths{31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
constexpr std::uint32_t kByteOrderMarker = 0x01020304u;
constexpr std::uint32_t kSwappedMarker = 0x04030201u;

template <typename T>
void require_monotone(const std::vector<T>& v, const char* what) {
    if (v.size() < 2) return;
    const bool up = v[1] > v[0];
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (up ? !(v[i] > v[i - 1]) : !(v[i] < v[i - 1])) {
            throw ValueError(std::string(what) + " coordinates must be strictly monotone");
        }
    }
}

} // namespace

int days_in_month(int month) {
    if (month < 1 || month > 12) throw ValueError("month out of range: " + std::to_string(month));
    return kMonthLengths[static_cast<std::size_t>(month - 1)];
}

DayIndex day_index(int year, int month, int day) {
    if (day < 1 || day > days_in_month(month)) {
        throw ValueError("day " + std::to_string(day) + " out of range for month " + std::to_string(month));
    }
    DayIndex doy = day - 1;
    for (int m = 1; m < month; ++m) doy += days_in_month(m);
    return static_cast<DayIndex>(year) * kDaysPerYear + doy;
}

DayIndex day_index(const Date& date) { return day_index(date.year, date.month, date.day); }

Date date_of(DayIndex day) {
    Date d;
    d.year = year_of(day);
    int doy = day_of_year(day);
    d.month = 1;
    while (doy >= days_in_month(d.month)) {
        doy -= days_in_month(d.month);
        ++d.month;
    }
    d.day = doy + 1;
    return d;
}

int month_of(DayIndex day) { return date_of(day).month; }

std::string format_date(const Date& date) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", date.year, date.month, date.day);
    return buf;
}

Date parse_date(const std::string& text) {
    Date d;
    char tail = 0;
    if (std::sscanf(text.c_str(), "%d-%d-%d%c", &d.year, &d.month, &d.day, &tail) != 3) {
        throw ValueError("malformed date '" + text + "', expected YYYY-MM-DD");
    }
    day_index(d); // validates month/day
    return d;
}

// ---------------------------------------------------------------------------

PeriodSpec::PeriodSpec(int start, int end, std::set<int> months_filter)
    : start_year(start), end_year(end), months(std::move(months_filter)) {
    if (start_year > end_year) {
        throw ValueError("period start " + std::to_string(start_year) + " after end " + std::to_string(end_year));
    }
    for (int m : months) days_in_month(m);
}

bool PeriodSpec::contains(DayIndex day) const {
    const int y = year_of(day);
    if (y < start_year || y > end_year) return false;
    return months.empty() || months.count(month_of(day)) > 0;
}

std::string PeriodSpec::label() const {
    std::string s = std::to_string(start_year) + "-" + std::to_string(end_year);
    if (!months.empty()) {
        s += ":";
        bool first = true;
        for (int m : months) {
            if (!first) s += ",";
            s += std::to_string(m);
            first = false;
        }
    }
    return s;
}

std::size_t PeriodSpec::day_count() const {
    std::size_t per_year = 0;
    for (int m = 1; m <= 12; ++m) {
        if (months.empty() || months.count(m)) per_year += static_cast<std::size_t>(days_in_month(m));
    }
    return per_year * static_cast<std::size_t>(end_year - start_year + 1);
}

PeriodSpec PeriodSpec::parse(const std::string& text) {
    int a = 0, b = 0;
    char tail = 0;
    if (std::sscanf(text.c_str(), "%d-%d%c", &a, &b, &tail) == 2) return PeriodSpec(a, b);
    if (std::sscanf(text.c_str(), "%d%c", &a, &tail) == 1) return PeriodSpec(a, a);
    throw ValueError("malformed period '" + text + "', expected YYYY-YYYY");
}

// ---------------------------------------------------------------------------

void GridField::validate() const {
    if (values.rank() != 4) {
        throw ShapeError("grid values must be [T,C,H,W], got " + shape_string(values.shape()));
    }
    if (variables.size() != channels()) throw ShapeError("variable names do not match channel count");
    if (units.size() != channels()) throw ShapeError("units do not match channel count");
    if (lat.size() != height()) throw ShapeError("lat length does not match grid height");
    if (lon.size() != width()) throw ShapeError("lon length does not match grid width");
    if (time.size() != steps()) throw ShapeError("calendar length does not match time steps");
    require_monotone(lat, "lat");
    require_monotone(lon, "lon");
    for (std::size_t i = 1; i < time.size(); ++i) {
        if (time[i] <= time[i - 1]) throw ValueError("time axis must be strictly increasing");
    }
}

GridField GridField::take(const std::vector<std::size_t>& indices) const {
    GridField out;
    out.variables = variables;
    out.units = units;
    out.lat = lat;
    out.lon = lon;
    out.attributes = attributes;
    const std::size_t step = step_size();
    std::vector<double> data(indices.size() * step);
    out.time.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t t = indices[k];
        if (t >= steps()) throw ValueError("time index out of range");
        std::copy_n(values.data().data() + t * step, step, data.data() + k * step);
        out.time.push_back(time[t]);
    }
    out.values = Tensor(Shape{indices.size(), channels(), height(), width()}, std::move(data));
    return out;
}

Tensor GridField::as_matrix() const { return values.reshaped(Shape{steps(), step_size()}); }

GridField select_period(const GridField& field, const PeriodSpec& period) {
    if (field.time.empty()) throw ValueError("cannot select a period from an empty field");
    const int first = year_of(field.time.front());
    const int last = year_of(field.time.back());
    if (period.start_year < first || period.end_year > last) {
        throw ValueError("period " + period.label() + " outside data range " + std::to_string(first) + "-" +
                         std::to_string(last));
    }
    std::vector<std::size_t> keep;
    for (std::size_t t = 0; t < field.time.size(); ++t) {
        if (period.contains(field.time[t])) keep.push_back(t);
    }
    if (keep.empty()) throw ValueError("period " + period.label() + " selects no time steps");
    return field.take(keep);
}

std::pair<GridField, GridField> align_time(const GridField& a, const GridField& b) {
    std::vector<std::size_t> ia, ib;
    std::size_t i = 0, j = 0;
    while (i < a.time.size() && j < b.time.size()) {
        if (a.time[i] < b.time[j]) {
            ++i;
        } else if (b.time[j] < a.time[i]) {
            ++j;
        } else {
            ia.push_back(i++);
            ib.push_back(j++);
        }
    }
    if (ia.empty()) throw ValueError("fields share no time steps");
    if (ia.size() == a.time.size() && ib.size() == b.time.size()) return {a, b};
    return {a.take(ia), b.take(ib)};
}

std::vector<DayIndex> daily_calendar(const Date& start, std::size_t count) {
    std::vector<DayIndex> t(count);
    const DayIndex first = day_index(start);
    for (std::size_t i = 0; i < count; ++i) t[i] = first + static_cast<DayIndex>(i);
    return t;
}

std::vector<DayIndex> daily_calendar(int start_year, int end_year) {
    if (start_year > end_year) throw ValueError("calendar start after end");
    return daily_calendar(Date{start_year, 1, 1},
                          static_cast<std::size_t>(end_year - start_year + 1) * kDaysPerYear);
}

std::vector<double> cell_centers(double lo, double hi, std::size_t n) {
    std::vector<double> c(n);
    const double step = (hi - lo) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = lo + (static_cast<double>(i) + 0.5) * step;
    return c;
}

// ---------------------------------------------------------------------------

std::string encode_grid(const GridField& field) {
    field.validate();
    std::string payload;
    payload.reserve(field.values.size() * sizeof(double));
    io::put_f64(payload, field.values.data());

    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t i = 0; i < field.time.size();) {
        std::size_t j = i + 1;
        while (j < field.time.size() && field.time[j] == field.time[j - 1] + 1) ++j;
        runs.push_back({{"start", format_date(date_of(field.time[i]))}, {"days", j - i}});
        i = j;
    }
    const Shape& s = field.values.shape();
    nlohmann::json header = {
        {"format", kGridMagic},
        {"shape", s},
        {"variables", field.variables},
        {"units", field.units},
        {"lat", field.lat},
        {"lon", field.lon},
        {"calendar", {{"type", "noleap"}, {"runs", runs}}},
        {"attributes", field.attributes},
        {"byte_order", "little"},
        {"payload_sha256", io::sha256_hex(payload)},
    };
    const std::string header_text = header.dump();

    std::string out(kGridMagic);
    io::put_u32(out, kByteOrderMarker);
    io::put_u64(out, header_text.size());
    out += header_text;
    out += payload;
    return out;
}

GridField decode_grid(std::string_view bytes) {
    io::ByteReader reader(bytes, "grid file");
    if (reader.take(std::strlen(kGridMagic)) != kGridMagic) throw FormatError("not an ENSDOWN grid file (bad magic)");
    const std::uint32_t marker = reader.u32();
    if (marker == kSwappedMarker) {
        throw FormatError("grid file byte-order marker is big-endian; only little-endian payloads are supported");
    }
    if (marker != kByteOrderMarker) throw FormatError("grid file has a corrupt byte-order marker");
    const std::uint64_t header_len = reader.u64();
    if (header_len > reader.remaining()) throw FormatError("grid header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(reader.take(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt grid header: ") + e.what());
    }

    GridField field;
    Shape shape;
    std::string checksum;
    try {
        shape = header.at("shape").get<Shape>();
        field.variables = header.at("variables").get<std::vector<std::string>>();
        field.units = header.at("units").get<std::vector<std::string>>();
        field.lat = header.at("lat").get<std::vector<double>>();
        field.lon = header.at("lon").get<std::vector<double>>();
        field.attributes = header.at("attributes").get<std::map<std::string, std::string>>();
        if (header.at("calendar").at("type") != "noleap") throw FormatError("unsupported calendar type");
        for (const auto& run : header.at("calendar").at("runs")) {
            const auto days = daily_calendar(parse_date(run.at("start").get<std::string>()),
                                             run.at("days").get<std::size_t>());
            field.time.insert(field.time.end(), days.begin(), days.end());
        }
        checksum = header.at("payload_sha256").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("incomplete grid header: ") + e.what());
    } catch (const ValueError& e) {
        throw FormatError(std::string("invalid grid header: ") + e.what());
    }
    if (shape.size() != 4) throw FormatError("grid header shape must have 4 dimensions");

    const std::size_t count = shape_size(shape);
    if (reader.remaining() != count * sizeof(double)) {
        throw FormatError("grid payload holds " + std::to_string(reader.remaining()) + " bytes but header shape " +
                          shape_string(shape) + " needs " + std::to_string(count * sizeof(double)));
    }
    const std::string_view payload = bytes.substr(bytes.size() - reader.remaining());
    if (io::sha256_hex(payload) != checksum) throw FormatError("grid payload checksum mismatch");

    std::vector<double> data(count);
    reader.f64(data);
    field.values = Tensor(shape, std::move(data));
    try {
        field.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("inconsistent grid header: ") + e.what());
    }
    return field;
}

void save_grid(const GridField& field, const std::filesystem::path& path) { io::atomic_write(path, encode_grid(field)); }

GridField load_grid(const std::filesystem::path& path) { return decode_grid(io::read_file(path)); }

} // namespace ensdown

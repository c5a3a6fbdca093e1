#include "bdf/io.hpp"

#include "bdf/errors.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace bdf {

namespace {

std::vector<std::string> split(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

int parse_binary(const std::string& s, std::size_t line, const std::string& column)
{
    if (s == "0") return 0;
    if (s == "1") return 1;
    throw IoError("line " + std::to_string(line) + ", column " + column + ": expected 0 or 1, got '" + s + "'");
}

} // namespace

Dataset read_dataset_csv(std::istream& in)
{
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty CSV input");
    const auto header = split(line);

    std::map<int, std::size_t> z_cols;
    std::optional<std::size_t> a_col, m_col, y_col, u_col, a2_col;
    for (std::size_t j = 0; j < header.size(); ++j) {
        const auto& h = header[j];
        auto set = [&](std::optional<std::size_t>& slot) {
            if (slot) throw IoError("duplicate column '" + h + "'");
            slot = j;
        };
        if (h.size() > 1 && h[0] == 'z' && h.find_first_not_of("0123456789", 1) == std::string::npos) {
            const int k = std::stoi(h.substr(1));
            if (!z_cols.emplace(k, j).second) throw IoError("duplicate column '" + h + "'");
        } else if (h == "a") set(a_col);
        else if (h == "m") set(m_col);
        else if (h == "y") set(y_col);
        else if (h == "u") set(u_col);
        else if (h == "a2") set(a2_col);
        else throw IoError("unknown column '" + h + "'");
    }
    if (!a_col || !y_col) throw IoError("CSV must contain columns a and y");
    int expect = 1;
    for (const auto& [k, j] : z_cols) {
        if (k != expect++) throw IoError("covariate columns must be z1..zp without gaps");
    }

    Dataset d;
    d.z_dim = static_cast<int>(z_cols.size());
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = split(line);
        if (cells.size() != header.size()) {
            throw IoError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                          " fields, got " + std::to_string(cells.size()));
        }
        for (const auto& [k, j] : z_cols) d.z.push_back(parse_binary(cells[j], lineno, header[j]));
        d.a.push_back(parse_binary(cells[*a_col], lineno, "a"));
        d.y.push_back(parse_binary(cells[*y_col], lineno, "y"));
        if (m_col) d.m.push_back(parse_binary(cells[*m_col], lineno, "m"));
        if (u_col) d.u.push_back(parse_binary(cells[*u_col], lineno, "u"));
        if (a2_col) d.a2.push_back(parse_binary(cells[*a2_col], lineno, "a2"));
    }
    if (d.size() == 0) throw IoError("CSV has a header but no data rows");
    d.validate();
    return d;
}

Dataset read_dataset_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return read_dataset_csv(in);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void write_dataset_csv(const Dataset& d, std::ostream& out)
{
    for (int k = 0; k < d.z_dim; ++k) out << 'z' << (k + 1) << ',';
    out << (d.has_m() ? "a,m,y" : "a,y");
    if (d.has_u()) out << ",u";
    if (d.has_a2()) out << ",a2";
    out << '\n';
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (int v : d.z_row(i)) out << v << ',';
        out << d.a[i] << ',';
        if (d.has_m()) out << d.m[i] << ',';
        out << d.y[i];
        if (d.has_u()) out << ',' << d.u[i];
        if (d.has_a2()) out << ',' << d.a2[i];
        out << '\n';
    }
}

void write_dataset_csv(const Dataset& data, const std::filesystem::path& path)
{
    std::ostringstream os;
    write_dataset_csv(data, os);
    write_text_file(path, os.str());
}

void write_text_file(const std::filesystem::path& path, const std::string& text)
{
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    out.flush();
    if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace bdf

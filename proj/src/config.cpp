#include "musekit/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace musekit {

namespace {

std::string trim(const std::string & s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

const char * kind_name(Config::kind k) {
    switch (k) {
        case Config::kind::int64:   return "int";
        case Config::kind::float64: return "float";
        case Config::kind::boolean: return "bool";
        case Config::kind::string:  return "string";
    }
    return "?";
}

} // namespace

void Config::declare_int(const std::string & key, int64_t def, const std::string & help) {
    require(!index_.count(key), error_kind::contract, "config key declared twice: " + key);
    index_[key] = decls_.size();
    Decl d;
    d.key = key;
    d.k = kind::int64;
    d.help = help;
    d.iv = def;
    decls_.push_back(std::move(d));
}

void Config::declare_double(const std::string & key, double def, const std::string & help) {
    require(!index_.count(key), error_kind::contract, "config key declared twice: " + key);
    index_[key] = decls_.size();
    Decl d;
    d.key = key;
    d.k = kind::float64;
    d.help = help;
    d.dv = def;
    decls_.push_back(std::move(d));
}

void Config::declare_bool(const std::string & key, bool def, const std::string & help) {
    require(!index_.count(key), error_kind::contract, "config key declared twice: " + key);
    index_[key] = decls_.size();
    Decl d;
    d.key = key;
    d.k = kind::boolean;
    d.help = help;
    d.bv = def;
    decls_.push_back(std::move(d));
}

void Config::declare_string(const std::string & key, const std::string & def, const std::string & help) {
    require(!index_.count(key), error_kind::contract, "config key declared twice: " + key);
    index_[key] = decls_.size();
    Decl d;
    d.key = key;
    d.k = kind::string;
    d.help = help;
    d.sv = def;
    decls_.push_back(std::move(d));
}

bool Config::declared(const std::string & key) const { return index_.count(key) != 0; }

Config::Decl & Config::decl(const std::string & key, kind expect, const char * op) {
    auto it = index_.find(key);
    require(it != index_.end(), error_kind::contract, std::string(op) + ": undeclared config key: " + key);
    Decl & d = decls_[it->second];
    require(d.k == expect, error_kind::contract,
            std::string(op) + ": key '" + key + "' is " + kind_name(d.k) + ", not " + kind_name(expect));
    return d;
}

const Config::Decl & Config::decl(const std::string & key, kind expect, const char * op) const {
    return const_cast<Config *>(this)->decl(key, expect, op);
}

void Config::assign(const std::string & key, const std::string & raw, const std::string & where,
                    bool ignore_unknown) {
    auto it = index_.find(key);
    if (it == index_.end()) {
        if (ignore_unknown) return;
        fail(error_kind::config, where + ": unknown key '" + key + "'");
    }
    Decl & d = decls_[it->second];
    const std::string v = trim(raw);
    switch (d.k) {
        case kind::int64: {
            char * end = nullptr;
            const long long parsed = std::strtoll(v.c_str(), &end, 10);
            if (v.empty() || end != v.c_str() + v.size()) {
                fail(error_kind::config, where + ": key '" + key + "' expects int, got '" + v + "'");
            }
            d.iv = (int64_t)parsed;
            break;
        }
        case kind::float64: {
            char * end = nullptr;
            const double parsed = std::strtod(v.c_str(), &end);
            if (v.empty() || end != v.c_str() + v.size()) {
                fail(error_kind::config, where + ": key '" + key + "' expects float, got '" + v + "'");
            }
            d.dv = parsed;
            break;
        }
        case kind::boolean: {
            if (v == "true" || v == "1") d.bv = true;
            else if (v == "false" || v == "0") d.bv = false;
            else fail(error_kind::config, where + ": key '" + key + "' expects bool (true/false/1/0), got '" + v + "'");
            break;
        }
        case kind::string: d.sv = v; break;
    }
}

void Config::parse_file(const std::string & path) {
    std::ifstream is(path);
    require(is.good(), error_kind::config, "cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    parse_text(ss.str(), path, false);
}

void Config::parse_text(const std::string & text, const std::string & origin, bool ignore_unknown) {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            fail(error_kind::config, where + ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) fail(error_kind::config, where + ": empty key");
        assign(key, line.substr(eq + 1), where, ignore_unknown);
    }
}

void Config::apply_flags(const std::vector<std::string> & args) {
    for (size_t i = 0; i < args.size(); ++i) {
        const std::string & a = args[i];
        if (a.rfind("--", 0) != 0 || a.size() <= 2) {
            fail(error_kind::config, "expected --key, got '" + a + "'");
        }
        std::string key = a.substr(2);
        std::string value;
        const size_t eq = key.find('=');
        if (eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= args.size()) {
                fail(error_kind::config, "flag --" + key + " is missing a value");
            }
            value = args[++i];
        }
        assign(key, value, "flag --" + key, false);
    }
}

int64_t Config::get_int(const std::string & key) const { return decl(key, kind::int64, "get_int").iv; }
double Config::get_double(const std::string & key) const { return decl(key, kind::float64, "get_double").dv; }
bool Config::get_bool(const std::string & key) const { return decl(key, kind::boolean, "get_bool").bv; }
const std::string & Config::get_string(const std::string & key) const { return decl(key, kind::string, "get_string").sv; }

void Config::set_int(const std::string & key, int64_t v) { decl(key, kind::int64, "set_int").iv = v; }
void Config::set_double(const std::string & key, double v) { decl(key, kind::float64, "set_double").dv = v; }
void Config::set_bool(const std::string & key, bool v) { decl(key, kind::boolean, "set_bool").bv = v; }
void Config::set_string(const std::string & key, const std::string & v) { decl(key, kind::string, "set_string").sv = v; }

std::string Config::serialize() const {
    std::ostringstream os;
    for (const Decl & d : decls_) {
        os << d.key << " = ";
        switch (d.k) {
            case kind::int64:   os << d.iv; break;
            case kind::float64: {
                std::ostringstream v;
                v.precision(17);
                v << d.dv;
                os << v.str();
                break;
            }
            case kind::boolean: os << (d.bv ? "true" : "false"); break;
            case kind::string:  os << d.sv; break;
        }
        os << "\n";
    }
    return os.str();
}

std::string Config::describe() const {
    std::ostringstream os;
    for (const Decl & d : decls_) {
        os << "  " << d.key << " (" << kind_name(d.k) << ", default ";
        switch (d.k) {
            case kind::int64:   os << d.iv; break;
            case kind::float64: os << d.dv; break;
            case kind::boolean: os << (d.bv ? "true" : "false"); break;
            case kind::string:  os << (d.sv.empty() ? "\"\"" : d.sv); break;
        }
        os << ")";
        if (!d.help.empty()) os << "  " << d.help;
        os << "\n";
    }
    return os.str();
}

} // namespace musekit

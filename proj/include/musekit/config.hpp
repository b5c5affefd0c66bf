#pragma once

#include "musekit/common.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace musekit {

// Typed key=value settings with declared defaults. Precedence: declaration
// default < config file < command-line flags. Unknown keys are rejected for
// user input; checkpoint-embedded snapshots parse with ignore_unknown so a
// sampling command can read just the keys it declares.
class Config {
public:
    enum class kind { int64, float64, boolean, string };

    void declare_int(const std::string & key, int64_t def, const std::string & help = "");
    void declare_double(const std::string & key, double def, const std::string & help = "");
    void declare_bool(const std::string & key, bool def, const std::string & help = "");
    void declare_string(const std::string & key, const std::string & def, const std::string & help = "");

    bool declared(const std::string & key) const;

    void parse_file(const std::string & path);
    void parse_text(const std::string & text, const std::string & origin, bool ignore_unknown = false);
    // flags come as "--key value" or "--key=value"
    void apply_flags(const std::vector<std::string> & args);

    int64_t get_int(const std::string & key) const;
    double get_double(const std::string & key) const;
    bool get_bool(const std::string & key) const;
    const std::string & get_string(const std::string & key) const;

    void set_int(const std::string & key, int64_t v);
    void set_double(const std::string & key, double v);
    void set_bool(const std::string & key, bool v);
    void set_string(const std::string & key, const std::string & v);

    // key = value lines in declaration order (feeds checkpoint snapshots)
    std::string serialize() const;
    std::string describe() const;    // help text: key, type, default, description

private:
    struct Decl {
        std::string key;
        kind k;
        std::string help;
        int64_t iv = 0;
        double dv = 0;
        bool bv = false;
        std::string sv;
    };
    std::vector<Decl> decls_;
    std::unordered_map<std::string, size_t> index_;

    Decl & decl(const std::string & key, kind expect, const char * op);
    const Decl & decl(const std::string & key, kind expect, const char * op) const;
    void assign(const std::string & key, const std::string & raw, const std::string & where,
                bool ignore_unknown);
};

} // namespace musekit

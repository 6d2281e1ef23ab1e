#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "refuseg/trainer/trainer.hpp"

namespace refuseg::cli {

// Every configurable key, in the order format_config prints them.
const std::vector<std::string>& config_keys();

// Sets one `key = value` entry; unknown keys and malformed values are
// configuration errors.
void apply_setting(trainer::RunConfig& cfg, const std::string& key, const std::string& value);

// Parses `key = value` lines on top of `base`. Blank lines and text after '#'
// are ignored.
trainer::RunConfig parse_config(const std::string& text, trainer::RunConfig base = {});
trainer::RunConfig read_config_file(const std::string& path, trainer::RunConfig base = {});

// One `key = value` line per key; numbers use the shortest round-trip form,
// so parse_config(format_config(c)) == c.
std::string format_config(const trainer::RunConfig& cfg);

// Entry point: 0 success, 1 runtime error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace refuseg::cli

#pragma once

// Versioned text checkpoints. Parameters are stored as hex floats so a
// save/load round trip is bit-exact.

#include <cstdint>
#include <iosfwd>
#include <string>

#include "cmf/injective.hpp"

namespace cmf::checkpoint {

struct Checkpoint {
  injective::InjectiveFlow model;
  std::uint64_t seed = 0;
  int epoch = -1;
};

void write(std::ostream& out, const Checkpoint& ck);
Checkpoint read(std::istream& in);

void save(const std::string& path, const Checkpoint& ck);
Checkpoint load(const std::string& path);

}  // namespace cmf::checkpoint

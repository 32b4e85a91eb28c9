#pragma once

// Versioned binary checkpoint: "MSDC" magic, header (format version, kind,
// frozen-teacher variant tag, encoder config, head dims), then named sections
// of named parameter blobs (name length + name + shape + float32 data,
// little-endian throughout). Round-trips are bit-exact.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msd/model.hpp"
#include "msd/params.hpp"

namespace msd {

enum class CheckpointKind : std::uint32_t {
    Student = 0,
    TrainerState = 1,
    FrozenTeacher = 2,
};

enum class FrozenVariantTag : std::uint32_t {
    None = 0,
    RandomFrozen = 1,
    FileLoaded = 2,
    ConstantStub = 3,
};

struct Checkpoint {
    CheckpointKind kind = CheckpointKind::Student;
    FrozenVariantTag frozen_variant = FrozenVariantTag::None;
    ModelConfig model;
    std::vector<std::pair<std::string, ParamSet<float>>> sections;

    const ParamSet<float>& section(const std::string& name) const;
    ParamSet<float>& section(const std::string& name);
    bool has_section(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace msd

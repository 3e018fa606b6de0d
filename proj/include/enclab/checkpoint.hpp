#pragma once

#include <map>
#include <optional>
#include <string>

#include "enclab/model.hpp"
#include "enclab/optimizer.hpp"

namespace enclab {

enum class Phase : uint8_t { wsd = 0, cooled = 1 };
enum class ObjectiveKind : uint8_t { mlm = 0, rtd = 1 };

std::string objective_name(ObjectiveKind k);
ObjectiveKind objective_from_name(const std::string& s);

/// Full training state at a branch point. `spec` describes the encoder that
/// downstream evaluation sees (the discriminator for RTD runs); `params`
/// holds every named trainable ("model.*" for MLM; "gen.*", "disc.*",
/// "head.*" for RTD).
struct Checkpoint {
  EncoderSpec spec;
  ObjectiveKind objective = ObjectiveKind::mlm;
  Phase phase = Phase::wsd;
  Index tokens_seen = 0;
  std::uint64_t step = 0;
  std::uint64_t run_seed = 0;
  std::string rng_blob;
  std::map<std::string, Tensor> params;
  AdamState adam;
};

/// Hash of the architectural identity (spec + objective), used to refuse
/// loading a checkpoint into a mismatched run.
std::uint64_t checkpoint_spec_hash(const EncoderSpec& spec,
                                   ObjectiveKind objective);

/// Versioned binary, written atomically: header (magic, version, payload
/// hash) + spec json + counters + named tensor sections + optimizer moments.
/// Round-trips bit-exactly.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

/// Validates magic, version, and payload hash before constructing anything;
/// a corrupted file is refused without partial state. When expected_spec_hash
/// is given, a mismatch is refused naming both hashes.
Checkpoint load_checkpoint(
    const std::string& path,
    std::optional<std::uint64_t> expected_spec_hash = std::nullopt);

}  // namespace enclab

#pragma once

#include <optional>
#include <string>

#include "cakes/search.hpp"

namespace cakes {

// Parameters and normalisation statistics keyed by their stable names.
// Values are written with round-trip precision.
Json network_state_to_json(Network& net);
// Names, shapes and counts must match exactly.
void load_network_state(Network& net, const Json& state);

/// Trained final network: backbone, replacement config, weights.
struct FinalCheckpoint {
  BackboneSpec backbone;
  ReplacementConfig config;
  Json state;
};

Json final_checkpoint_to_json(const BackboneSpec& spec, const ReplacementConfig& cfg, Network& net);
FinalCheckpoint final_checkpoint_from_json(const Json& doc);
Network restore_final_network(const FinalCheckpoint& ckpt);

Json supernet_checkpoint_to_json(SuperNet& net);

}  // namespace cakes

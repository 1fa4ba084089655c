#pragma once

#include <string>
#include <string_view>

#include "plab/nn.hpp"
#include "plab/optim.hpp"
#include "plab/probes.hpp"
#include "plab/taskgen.hpp"

// JSON forms of the lab's records. Each to_json returns a single line.
namespace plab {

std::string to_json(const TaskSpec& x);
std::string to_json(const HierarchicalTaskSpec& x);
std::string to_json(const ArchDescriptor& x);
std::string to_json(const TrainConfig& x);
std::string to_json(const ProbeSchedule& x);
std::string to_json(const TauEstimate& x);
std::string to_json(const DeltaZOnset& x);
std::string to_json(const GroupSnapshot& x);
std::string to_json(const HessianProbe& x);
std::string to_json(const AblationReport& x);
std::string to_json(const DirectionConsistency& x);
std::string to_json(const DissipationResult& x);

TaskSpec task_spec_from_json(std::string_view s);
HierarchicalTaskSpec hierarchical_spec_from_json(std::string_view s);
ArchDescriptor arch_from_json(std::string_view s);
TrainConfig train_config_from_json(std::string_view s);
ProbeSchedule probe_schedule_from_json(std::string_view s);
TauEstimate tau_from_json(std::string_view s);
DirectionConsistency direction_from_json(std::string_view s);

}  // namespace plab

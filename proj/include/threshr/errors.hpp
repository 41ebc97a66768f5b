#pragma once

#include <stdexcept>
#include <string>

namespace threshr {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// data ingestion
struct MalformedRow : Error { using Error::Error; };
struct InconsistentRecord : Error { using Error::Error; };
struct EmptyDataset : Error { using Error::Error; };
struct DegenerateGrid : Error { using Error::Error; };
struct OutOfRangeOutcome : Error { using Error::Error; };

// regression engine
struct NonFiniteInput : Error { using Error::Error; };
struct SingularSystem : Error { using Error::Error; };

// nuisance / estimator layer
struct EmptyStratum : Error { using Error::Error; };
struct NoCompleteCases : Error { using Error::Error; };
struct EmptyCellNoSample : Error { using Error::Error; };
struct TargetingDiverged : Error { using Error::Error; };

// inference
struct DimensionMismatch : Error { using Error::Error; };
struct NonPSDMatrix : Error { using Error::Error; };
struct BandsNotComputed : Error { using Error::Error; };
struct NoEvents : Error { using Error::Error; };

// sims
struct UnknownFamily : Error { using Error::Error; };
struct StudyFailed : Error { using Error::Error; };

}  // namespace threshr

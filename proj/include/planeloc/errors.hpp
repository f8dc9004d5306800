#pragma once

#include <stdexcept>
#include <string>

namespace planeloc {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define PLANELOC_ERROR_TYPE(Name)                                              \
  class Name : public Error {                                                  \
  public:                                                                      \
    using Error::Error;                                                        \
  }

// geometry
PLANELOC_ERROR_TYPE(LogNearSingularity);
PLANELOC_ERROR_TYPE(DegenerateNormals);
PLANELOC_ERROR_TYPE(BehindCamera);
PLANELOC_ERROR_TYPE(RayParallel);
PLANELOC_ERROR_TYPE(NegativeDepth);

// plane extraction
PLANELOC_ERROR_TYPE(NoPlaneFound);

// matching
PLANELOC_ERROR_TYPE(ShapeMismatch);
PLANELOC_ERROR_TYPE(DimensionMismatch);

// pose solving
PLANELOC_ERROR_TYPE(ParallelNormals);
PLANELOC_ERROR_TYPE(InsufficientCorrespondences);
PLANELOC_ERROR_TYPE(AllPairsParallel);
PLANELOC_ERROR_TYPE(RankDeficient);

// evaluation
PLANELOC_ERROR_TYPE(LengthMismatch);

// scene generation and I/O
PLANELOC_ERROR_TYPE(SamplingExhausted);
PLANELOC_ERROR_TYPE(ParseError);
PLANELOC_ERROR_TYPE(VersionMismatch);
PLANELOC_ERROR_TYPE(ConfigError);

#undef PLANELOC_ERROR_TYPE

} // namespace planeloc

#pragma once

// Compute precision is a build switch. Each precision lives in its own inline
// namespace so float and double builds of the library can be linked into the
// same binary without symbol clashes.

#ifdef MCM_DOUBLE
#define MCM_BEGIN_NAMESPACE \
  namespace mcm {           \
  inline namespace f64 {
#else
#define MCM_BEGIN_NAMESPACE \
  namespace mcm {           \
  inline namespace f32 {
#endif
#define MCM_END_NAMESPACE \
  }                       \
  }

MCM_BEGIN_NAMESPACE

#ifdef MCM_DOUBLE
using Scalar = double;
inline constexpr const char* kDtypeName = "f64";
#else
using Scalar = float;
inline constexpr const char* kDtypeName = "f32";
#endif

MCM_END_NAMESPACE

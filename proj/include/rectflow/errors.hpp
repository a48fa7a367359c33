#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace rectflow {

/// Base class of all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid argument or inconsistent parameter set.
struct ParameterError : Error { using Error::Error; };

/// Query point outside the declared domain.
struct DomainError : Error { using Error::Error; };

/// Not enough observations for the requested operation.
struct InsufficientDataError : Error { using Error::Error; };

/// Shrinking produced a body with empty interior.
struct EmptyBodyError : Error { using Error::Error; };

/// Operation undefined at t in {0, 1}; callers must use the endpoint formulas.
struct DegenerateTimeError : Error { using Error::Error; };

/// Kernel window carries no mass at the query point.
struct EmptyWindowError : Error { using Error::Error; };

/// Estimator evaluated below its endpoint guard t0.
struct EndpointError : Error { using Error::Error; };

/// All mixture weights vanished, even in log space.
struct FarFieldError : Error { using Error::Error; };

/// Regression fit failed (rank deficiency beyond jitter, non-convergence).
struct FitError : Error { using Error::Error; };

/// Quadrature region too degenerate to support the moment system.
struct DegenerateRegionError : Error { using Error::Error; };

/// Experiment-level failure (too many replicate failures, missing artifact).
struct ExperimentError : Error { using Error::Error; };

/// Time covariance singular at the given t.
struct SingularTimeError : Error {
    double t;
    SingularTimeError(double t_, const std::string& msg) : Error(msg), t(t_) {}
};

/// Non-finite velocity encountered while integrating; carries the location.
struct IntegrationError : Error {
    double t;
    std::vector<double> z;
    IntegrationError(double t_, std::vector<double> z_, const std::string& msg)
        : Error(msg), t(t_), z(std::move(z_)) {}
};

}  // namespace rectflow

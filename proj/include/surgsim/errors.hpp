#pragma once

#include <stdexcept>
#include <string>

namespace surgsim {

// Precondition or shape violation by the caller.
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class UnreachableTarget : public std::runtime_error {
public:
    UnreachableTarget(const std::string& what, double residual)
        : std::runtime_error(what), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class SimulationDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class PlacementInfeasible : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UndefinedOrientation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NoFeasiblePlan : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InsufficientSuccess : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TargetOutOfView : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CorruptFile : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace surgsim

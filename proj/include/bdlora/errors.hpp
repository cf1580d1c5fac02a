#pragma once

#include <stdexcept>
#include <string>

namespace bdlora {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

#define BDLORA_DEFINE_ERROR(Name, tag)                                   \
    class Name : public Error {                                          \
    public:                                                              \
        using Error::Error;                                              \
        const char* kind() const noexcept override { return tag; }      \
    };

BDLORA_DEFINE_ERROR(ShapeError, "shape_error")
BDLORA_DEFINE_ERROR(DivisibilityError, "divisibility_error")
BDLORA_DEFINE_ERROR(MeshError, "mesh_error")
BDLORA_DEFINE_ERROR(ConfigError, "config_error")
BDLORA_DEFINE_ERROR(DomainError, "domain_error")
BDLORA_DEFINE_ERROR(StrategyError, "strategy_error")
BDLORA_DEFINE_ERROR(FormatError, "format_error")
BDLORA_DEFINE_ERROR(ReconcileError, "reconcile_error")
BDLORA_DEFINE_ERROR(ExactnessError, "exactness_error")

#undef BDLORA_DEFINE_ERROR

}  // namespace bdlora

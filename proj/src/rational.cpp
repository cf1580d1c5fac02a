#include "bdlora/rational.hpp"

#include <fmt/format.h>

namespace bdlora {

std::string to_string(const Rational& q) {
    if (q.denominator() == 1) return std::to_string(q.numerator());
    return fmt::format("{}/{}", q.numerator(), q.denominator());
}

}  // namespace bdlora

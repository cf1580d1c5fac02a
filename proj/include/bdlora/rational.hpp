#pragma once

#include <cstdint>
#include <string>

#include <boost/rational.hpp>

namespace bdlora {

using Rational = boost::rational<std::int64_t>;

inline double to_double(const Rational& q) {
    return boost::rational_cast<double>(q);
}

inline bool is_integer(const Rational& q) { return q.denominator() == 1; }

/// "n" for integers, "n/d" otherwise.
std::string to_string(const Rational& q);

}  // namespace bdlora

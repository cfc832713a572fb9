#ifndef MTEM_MTEM_HPP_
#define MTEM_MTEM_HPP_

#include "analysis.hpp"
#include "core.hpp"
#include "macro.hpp"
#include "micro.hpp"
#include "noise.hpp"
#include "parallel.hpp"
#include "probe.hpp"
#include "systems.hpp"

#endif // MTEM_MTEM_HPP_

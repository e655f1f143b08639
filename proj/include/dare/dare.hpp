#pragma once

// Umbrella header.

#include "dare/error.hpp"
#include "dare/geom.hpp"
#include "dare/spatial.hpp"
#include "dare/weights.hpp"
#include "dare/mixture.hpp"
#include "dare/resample.hpp"
#include "dare/synth.hpp"
#include "dare/evalkit.hpp"
#include "dare/io.hpp"

#pragma once

#include "stratfit/normal.hpp"
#include "stratfit/error.hpp"
#include "stratfit/strata_grid.hpp"
#include "stratfit/model.hpp"
#include "stratfit/dataset.hpp"
#include "stratfit/distributions.hpp"
#include "stratfit/likelihood.hpp"
#include "stratfit/m_step.hpp"
#include "stratfit/parallel.hpp"
#include "stratfit/warm_start.hpp"
#include "stratfit/fit.hpp"
#include "stratfit/inference.hpp"
#include "stratfit/diagnostics.hpp"
#include "stratfit/simulation.hpp"
#include "stratfit/io.hpp"

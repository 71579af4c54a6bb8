#pragma once

#include "fws/pipeline.hpp"

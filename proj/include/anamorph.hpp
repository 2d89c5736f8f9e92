#pragma once

#include "anamorph/backends.hpp"
#include "anamorph/blend.hpp"
#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"
#include "anamorph/keyvalue.hpp"
#include "anamorph/parallel.hpp"
#include "anamorph/png_io.hpp"
#include "anamorph/pyramid.hpp"
#include "anamorph/stubs.hpp"
#include "anamorph/sync.hpp"
#include "anamorph/uvmap.hpp"
#include "anamorph/views.hpp"
#include "anamorph/warp.hpp"
#include "anamorph/wire.hpp"

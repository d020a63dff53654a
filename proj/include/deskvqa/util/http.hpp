#pragma once

#include <httplib.h>

// <resolv.h>, pulled in by httplib on Linux, defines _res as a macro. Eigen
// uses _res as a parameter name, so drop the macro once httplib is in.
#ifdef _res
#undef _res
#endif

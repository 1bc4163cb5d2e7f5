#include "commands.hpp"

// Command implementations are filled in alongside the subsystems they wire
// together; see commands_*.cpp.

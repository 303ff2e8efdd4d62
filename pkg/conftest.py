import os
import sys

# The compo_* modules live flat at the repository root
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# Previews draw off-screen
os.environ.setdefault("SDL_VIDEODRIVER", "dummy")
os.environ.setdefault("PYGAME_HIDE_SUPPORT_PROMPT", "1")

import compo_globals  # noqa: E402

compo_globals.debugger.printEnabled = False

"""compo_fonts - pygame preview fonts for compo

This module handles pygame SysFonts.

Requirements
------------
compo_globals : Program-wide global variable module for compo.
pygame : library for the development of multimedia applications

Functions
---------
init_fonts() : call pygame.font.SysFont() to initialize each desired typeface
"""

import pygame
import compo_globals

font = {}  # Fonts used throughout the previews stored here as a dict


def init_fonts():
    # Don't call this until after pygame.font.init()
    global font
    try:
        compo_globals.debugger.message("PYGA", "Loading SysFonts")
        font = {'small': pygame.font.SysFont('courier', 16),
                'small_bold': pygame.font.SysFont('courier', 16, bold=True)}
    except Exception as e:
        compo_globals.debugger.message("EXCEPTION",
                                       "Error loading SysFonts: {}".
                                       format(e))
        compo_globals.debugger.exit("Could not load fonts.")

"""compo_pygame - pygame scene preview renderer for compo

This module renders generated or held-out scenes to PNG previews.  Nothing
opens a window: the display runs on SDL's dummy driver unless the
environment already names one.


Requirements
------------
compo_globals : Program-wide global variable module for compo.
compo_fonts : Pygame Sysfonts
compo_pygame_scene : Scene panel, one colour per component.
compo_pygame_terminal : Panel with metric lines and the debugger log tail.
pygame : library for the development of multimedia applications
os : SDL driver selection before pygame.display.init()

Classes
-------
CompoPygame : Pygame class for compo.

Functions
---------
pygame_terminate() : Gracefully terminate pygame.
"""

import os
import compo_globals
import compo_fonts
import pygame
from compo_pygame_scene import GUISurfaceScene
from compo_pygame_terminal import GUISurfaceTerminal


def pygame_terminate():
    """Gracefully terminate pygame.

    This should try to handle any final cleanup and close any open resources
    used by pygame.
    """
    try:
        compo_globals.debugger.message("PYGA", "Quitting Pygame")
        pygame.quit()
    except Exception as e:
        compo_globals.debugger.message("EXCEPTION",
                                       "Error during pygame.quit(): {}".
                                       format(e))


class CompoPygame(object):
    def __init__(self, **kwargs):
        self.canvas_size = kwargs.get(
            'size', compo_globals.config['render'].getint('size'))
        self.terminal_height = kwargs.get('terminal_height', 160)
        self.log_lines = kwargs.get('log_lines', 4)

        try:
            compo_globals.debugger.message("PYGA", "Starting Pygame")

            # Only init the display and fonts.  Previews are written to disk.
            os.environ.setdefault("SDL_VIDEODRIVER", "dummy")
            pygame.display.init()
            pygame.font.init()

            # Set up global fonts for the previews
            compo_fonts.init_fonts()

        except Exception as e:
            compo_globals.debugger.message("EXCEPTION",
                                           "Error during pygame init(): {}".
                                           format(e))
            compo_globals.debugger.exit("Could not pygame init().")

        self.gui_surfaces = []

    def init_gui_surfaces(self, points, layout, title, lines):
        """Set-up the preview panels for one scene, and append() each to
        gui_surfaces."""
        self.gui_surfaces = []
        margin = compo_globals.canvas_margin

        gui_scene = GUISurfaceScene(canvas_width=self.canvas_size,
                                    canvas_height=self.canvas_size,
                                    blit_x=0,
                                    blit_y=0,
                                    points=points,
                                    layout=layout,
                                    title=title)
        self.gui_surfaces.append(gui_scene)

        gui_terminal = GUISurfaceTerminal(canvas_width=self.canvas_size,
                                          canvas_height=self.terminal_height,
                                          blit_x=0,
                                          blit_y=self.canvas_size + margin,
                                          header_lines=lines,
                                          log_lines=self.log_lines,
                                          log_lines_max_len=int(
                                              self.canvas_size / 10))
        self.gui_surfaces.append(gui_terminal)

    def render_scene(self, points, layout, path, title='', lines=()):
        """Draw one scene with its layout underlay and metric lines, and
        save it as an image at path."""
        self.init_gui_surfaces(points, layout, title, list(lines))
        margin = compo_globals.canvas_margin
        canvas = pygame.Surface(
            (self.canvas_size + 2 * margin,
             self.canvas_size + self.terminal_height + 3 * margin))
        try:
            canvas.fill(compo_globals.color_black)
            for gui_surface in self.gui_surfaces:
                gui_surface.draw_control()
                canvas.blit(gui_surface.surface,
                            [gui_surface.blit_x, gui_surface.blit_y])
            pygame.image.save(canvas, path)
        except Exception as e:
            compo_globals.debugger.message("EXCEPTION",
                                           "Error drawing pygame: {}".
                                           format(e))
            compo_globals.debugger.exit("Pygame render error.")
        compo_globals.debugger.message("PYGA", "Wrote preview: {}".format(
            path))
        compo_globals.debugger.log_stat("Previews rendered", 1)
        return path

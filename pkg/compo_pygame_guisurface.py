import compo_fonts
import compo_globals
import pygame


class GUISurface(object):
    def __init__(self, canvas_width, canvas_height, blit_x, blit_y, **kwargs):
        # Informal interface for a GUISurface

        self.canvas_width = canvas_width
        self.canvas_height = canvas_height

        self.color = kwargs.get('color', compo_globals.color_orange)
        self.color_bg = kwargs.get('color_bg', compo_globals.color_black)
        self.color_accent = kwargs.get('color_accent',
                                       compo_globals.color_orange_25)

        self.font = compo_fonts.font['small']

        # Where this panel is blit onto the preview canvas
        self.blit_x = blit_x
        self.blit_y = blit_y

        self.surface = pygame.Surface(
            (int(self.canvas_width + (compo_globals.canvas_margin * 2)),
             int(self.canvas_height + (compo_globals.canvas_margin * 2))))

    def draw_label(self, coordinates, text_label, font, color,
                   align="center"):
        text = font.render(text_label, False, color)

        text_x = 0
        text_y = 0

        if align == "center":
            text_x = int(text.get_width() / 2)
            text_y = int(text.get_height() / 2)

        self.surface.blit(text, [coordinates[0] - text_x,
                                 coordinates[1] - text_y])

    def draw_boxes(self, shape, color, width=0):
        for box in shape.coordinates_boxes:
            pygame.draw.rect(self.surface, color, pygame.Rect(*box), width)

    def draw_points(self, shape, color, radius=2):
        for point in shape.coordinates:
            pygame.draw.circle(self.surface, color, point, radius)

    def draw_control_border(self):
        """ Draw a control border
        # Rect(left, top, width, height)
        """
        rect_border = pygame.Rect(0, 0, self.canvas_width, self.canvas_height)
        pygame.draw.rect(self.surface, compo_globals.color_orange_50,
                         rect_border, 2)

    def draw_control(self):
        """ Draw the panel on self.surface.  Minimally fill and border.
        """
        self.surface.fill(self.color_bg)
        self.draw_control_border()

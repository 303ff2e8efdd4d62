from compo_pygame_guisurface import GUISurface
from compo_shapes import ShapeScenePoints, ShapeLayoutGrid
import compo_fonts
import compo_globals


class GUISurfaceScene(GUISurface):
    def __init__(self, canvas_width, canvas_height, blit_x, blit_y, **kwargs):
        super(GUISurfaceScene, self).__init__(canvas_width, canvas_height,
                                              blit_x, blit_y, **kwargs)

        # points : [N, L, dim] component point sets
        self.points = kwargs.get('points', [])
        self.layout = kwargs.get('layout')
        self.title = kwargs.get('title', '')
        self.point_radius = kwargs.get('point_radius', 2)

        size = min(self.canvas_width, self.canvas_height) - \
            2 * compo_globals.canvas_margin
        self.shape_layout = ShapeLayoutGrid(canvas_size=size,
                                            layout=self.layout)
        self.shape_components = [ShapeScenePoints(canvas_size=size,
                                                  points=component)
                                 for component in self.points]

    def draw_control(self):
        """ Overriding GUISurface.draw_control()
        """
        self.surface.fill(self.color_bg)
        self.draw_control_border()

        # Layout underlay first, then one colour per component
        self.draw_boxes(self.shape_layout, self.color_accent)
        colors = compo_globals.color_components
        for n, shape in enumerate(self.shape_components):
            self.draw_points(shape, colors[n % len(colors)],
                             self.point_radius)

        if self.title:
            self.draw_label(coordinates=(7, 5),
                            text_label=self.title,
                            font=compo_fonts.font['small_bold'],
                            color=self.color,
                            align="left")

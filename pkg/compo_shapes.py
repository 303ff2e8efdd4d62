"""compo_shapes - pixel coordinates for compo scene previews

Shapes map scene space ([-1, 1] on the first two axes, y up) onto a square
canvas of canvas_size pixels offset by the global canvas_margin.

Classes
-------
Shape : informal interface, fills coordinates / coordinates_boxes.
ShapeScenePoints : one pixel position per point of a component.
ShapeLayoutGrid : one box per occupied cell of a layout grid.
"""

import compo_globals


class Shape(object):
    def __init__(self, **kwargs):
        # Informal interface for Shape

        # Point-like shapes fill coordinates:
        self.coordinates = []  # [(x, y), (x, y), ...]
        # Rectangle-like shapes fill coordinates_boxes, which pygame
        #   expects in (x, y, w, h):
        self.coordinates_boxes = []  # [(x, y, w, h), ...]

        self.canvas_size = kwargs.get('canvas_size', 100)
        self.margin = compo_globals.canvas_margin

        self.find_coordinates(**kwargs)

    def to_pixels(self, x, y):
        scale = self.canvas_size / 2.0
        return (int(round(self.margin + (x + 1.0) * scale)),
                int(round(self.margin + (1.0 - y) * scale)))

    def find_coordinates(self, **kwargs):
        pass


class ShapeScenePoints(Shape):
    def find_coordinates(self, **kwargs):
        # dim 3 scenes are drawn top-down: the third axis is dropped
        for point in kwargs.get('points', []):
            self.coordinates.append(self.to_pixels(point[0], point[1]))


class ShapeLayoutGrid(Shape):
    def find_coordinates(self, **kwargs):
        layout = kwargs.get('layout')
        if layout is None:
            return
        grid = len(layout)
        cell = self.canvas_size / grid
        for row in range(grid):
            for col in range(grid):
                if layout[row][col]:
                    # row 0 covers the lowest y band
                    self.coordinates_boxes.append(
                        (int(self.margin + col * cell),
                         int(self.margin + (grid - row - 1) * cell),
                         int(cell), int(cell)))

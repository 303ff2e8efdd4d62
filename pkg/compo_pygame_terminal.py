from compo_pygame_guisurface import GUISurface
import compo_globals
import time


class GUISurfaceTerminal(GUISurface):
    def __init__(self, canvas_width, canvas_height, blit_x, blit_y, **kwargs):
        super(GUISurfaceTerminal, self).__init__(canvas_width, canvas_height,
                                                 blit_x, blit_y, **kwargs)

        # Lines pinned above the log tail, e.g. per-scene metrics
        self.header_lines = kwargs.get('header_lines', [])

        # 10 lines of logging shown by default
        self.log_lines = kwargs.get('log_lines', 10)

        # https://docs.python.org/3/library/time.html#time.strftime
        self.time_format = "%H:%M:%S"

        # To prevent text screen runoff:
        self.log_lines_max_len = kwargs.get('log_lines_max_len', 60)

    def lines(self):
        log_lines = compo_globals.debugger.messages[-self.log_lines:]
        lines = list(self.header_lines)
        for entry in log_lines:
            lines.append("{} {}- {}".format(
                time.strftime(self.time_format,
                              time.localtime(entry['timestamp'])),
                entry['severity'], entry['message']))
        return [line if len(line) <= self.log_lines_max_len else
                "{} ...".format(line[:(self.log_lines_max_len - 4)])
                for line in lines]

    def draw_control(self):
        """ Overriding GUISurface.draw_control()
        """
        self.surface.fill(self.color_bg)
        self.draw_control_border()

        lines = self.lines()
        if not lines:
            return
        line_spacing = int(self.canvas_height / len(lines))
        for i, line in enumerate(lines):
            self.draw_label(coordinates=(7, (i * line_spacing) + 5),
                            text_label=line,
                            font=self.font,
                            color=compo_globals.color_orange,
                            align="left")

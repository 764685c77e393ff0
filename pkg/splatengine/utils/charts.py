import textwrap

import plotly.graph_objects as go

from splatengine.utils.packages import get_package_version

BACKGROUND = "#F4F4F4"
CAMERA_COLOR = "#616161"
OBJECT_COLORS = ["#2C6496", "#39C6C0", "#17354F", "#227773", "#D8E6F3"]


def trace_color(obj: int) -> str:
    """Colour for a trajectory row id; 0 is the camera."""
    if obj == 0:
        return CAMERA_COLOR
    return OBJECT_COLORS[(obj - 1) % len(OBJECT_COLORS)]


def format_fig(
    fig: go.Figure,
    equal_axes: bool = False,
    units: str | None = None,
) -> go.Figure:
    """Apply the house chart style to a plotly figure.

    Args:
        fig (go.Figure): A plotly figure.
        equal_axes (bool): Whether one unit spans the same length on both
            axes, as bird's-eye paths need.
        units (str | None): Appended to both axis titles, e.g.
            "dataset units".

    Returns:
        go.Figure: The same figure, styled.
    """
    fig.update_layout(
        template="plotly_white",
        font=dict(family="Roboto Serif", color="black"),
        height=600,
        width=800,
        plot_bgcolor=BACKGROUND,
        paper_bgcolor=BACKGROUND,
        margin=dict(t=120, b=120, l=120, r=120),
        legend=dict(orientation="h", y=1.02, yanchor="bottom"),
        modebar=dict(
            bgcolor=BACKGROUND, color=BACKGROUND, activecolor=BACKGROUND
        ),
        title=wrap_text(fig.layout.title.text or ""),
    )
    fig.update_xaxes(gridcolor="white", zeroline=False)
    fig.update_yaxes(gridcolor="white", zeroline=False)
    if equal_axes:
        fig.update_yaxes(scaleanchor="x", scaleratio=1)
    if units:
        for axis in (fig.layout.xaxis, fig.layout.yaxis):
            if axis.title.text:
                axis.title.text = f"{axis.title.text} ({units})"

    fig.add_annotation(
        text=f"Source: splatengine (version {get_package_version()})",
        xref="paper",
        yref="paper",
        x=0,
        y=-0.2,
        showarrow=False,
        xanchor="left",
        yanchor="bottom",
    )
    return fig


def wrap_text(text: str, max_length: int = 80) -> str:
    """Break a chart title onto several lines between words."""
    if len(text) <= max_length:
        return text
    return "<br>".join(textwrap.wrap(text, max_length))

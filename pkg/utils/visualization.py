import plotly.graph_objects as go
from plotly.subplots import make_subplots
import pandas as pd
import numpy as np

from utils.powertrain import EfficiencyMap


def create_trajectory_chart(trajectory, title="Space-time trajectory"):
    fig = go.Figure()

    # Red phases of every stop line as thick horizontal segments
    for col in [c for c in trajectory.columns if c.endswith("_red")]:
        inter_id = col[: -len("_red")]
        d_sig = trajectory[f"{inter_id}_d_sig"].iloc[0]
        red = trajectory[col].astype(bool)
        fig.add_trace(
            go.Scatter(
                x=trajectory["t"].where(red),
                y=np.full(len(trajectory), d_sig),
                mode='lines',
                name=f'{inter_id} red',
                line=dict(color='#FF4B4B', width=6),
                connectgaps=False,
                hovertemplate="t: %{x:.1f}s<br>Stop line: %{y:.0f}m<extra></extra>"
            )
        )

    fig.add_trace(
        go.Scatter(
            x=trajectory["t"],
            y=trajectory["d_preceding"],
            mode='lines',
            name='Preceding',
            line=dict(color='rgba(0, 0, 0, 0.5)', dash='dash'),
            hovertemplate="t: %{x:.1f}s<br>Position: %{y:.1f}m<extra></extra>"
        )
    )
    fig.add_trace(
        go.Scatter(
            x=trajectory["t"],
            y=trajectory["d_ego"],
            mode='lines',
            name='Ego (MPC)',
            line=dict(color='#1f77b4', width=2),
            hovertemplate="t: %{x:.1f}s<br>Position: %{y:.1f}m<extra></extra>"
        )
    )

    fig.update_layout(
        title=title,
        height=500,
        template="plotly_white",
        hovermode='x unified',
        xaxis=dict(title="Time (s)"),
        yaxis=dict(title="Position (m)")
    )

    return fig


def create_speed_soc_chart(soc):
    fig = make_subplots(rows=2, cols=1, shared_xaxes=True,
                        subplot_titles=("Speed", "State of charge"),
                        vertical_spacing=0.12)

    fig.add_trace(
        go.Scatter(x=soc["t"], y=soc["v_ego"], mode='lines', name='Ego speed',
                   line=dict(color='#1f77b4', width=2)),
        row=1, col=1
    )
    fig.add_trace(
        go.Scatter(x=soc["t"], y=soc["soc_ego"], mode='lines', name='Ego SOC',
                   line=dict(color='#1f77b4', width=2)),
        row=2, col=1
    )
    if "soc_preceding" in soc:
        fig.add_trace(
            go.Scatter(x=soc["t"], y=soc["v_preceding"], mode='lines', name='Preceding speed',
                       line=dict(color='rgba(0, 0, 0, 0.5)', dash='dash')),
            row=1, col=1
        )
        fig.add_trace(
            go.Scatter(x=soc["t"], y=soc["soc_preceding"], mode='lines', name='Preceding SOC',
                       line=dict(color='rgba(0, 0, 0, 0.5)', dash='dash')),
            row=2, col=1
        )

    fig.update_layout(
        height=700,
        showlegend=True,
        template="plotly_white",
        hovermode='x unified',
        xaxis2=dict(title="Time (s)"),
        yaxis=dict(title="Speed (m/s)"),
        yaxis2=dict(title="SOC")
    )

    return fig


def create_powertrain_chart(series):
    fig = make_subplots(rows=2, cols=1, shared_xaxes=True,
                        subplot_titles=("Motor torques", "Battery power"),
                        vertical_spacing=0.12)

    fig.add_trace(
        go.Scatter(x=series["t"], y=series["T_f"], mode='lines', name='Front (IM)',
                   line=dict(color='#FF4B4B')),
        row=1, col=1
    )
    fig.add_trace(
        go.Scatter(x=series["t"], y=series["T_r"], mode='lines', name='Rear (PMSM)',
                   line=dict(color='#2ca02c')),
        row=1, col=1
    )
    fig.add_trace(
        go.Bar(x=series["t"], y=series["P_bat"] / 1000.0, name='P_bat (kW)',
               marker_color='#FFB6C1',
               hovertemplate="t: %{x:.1f}s<br>Power: %{y:.1f}kW<extra></extra>"),
        row=2, col=1
    )

    fig.update_layout(
        height=700,
        showlegend=True,
        template="plotly_white",
        hovermode='x unified',
        xaxis2=dict(title="Time (s)"),
        yaxis=dict(title="Torque (N·m)"),
        yaxis2=dict(title="Power (kW)")
    )

    return fig


def create_operating_points_chart(points, power_map: EfficiencyMap, motor="T_f", title=None):
    """Efficiency map heatmap with the visited operating points on top."""
    fig = go.Figure(data=go.Heatmap(
        z=power_map.eta.T,
        x=power_map.omega_grid,
        y=power_map.torque_grid,
        colorscale='Viridis',
        zmin=0.5,
        zmax=1.0,
        hoverongaps=False,
        colorbar=dict(title="Efficiency"),
        hovertemplate="ω: %{x:.0f}rad/s<br>T: %{y:.0f}N·m<br>η: %{z:.3f}<extra></extra>"
    ))
    fig.add_trace(
        go.Scatter(
            x=points["omega"],
            y=points[motor],
            mode='markers',
            name='Operating points',
            marker=dict(size=4, color='rgba(255, 255, 255, 0.7)', line=dict(color='black', width=0.5))
        )
    )

    fig.update_layout(
        title=title or f"{power_map.kind} operating points",
        xaxis_title="Motor speed (rad/s)",
        yaxis_title="Torque (N·m)",
        template="plotly_white",
        height=500
    )

    return fig


def create_summary_table(summaries):
    table = pd.DataFrame(summaries)
    return go.Figure(data=[go.Table(
        header=dict(values=list(table.columns), fill_color='#FFB6C1', align='left'),
        cells=dict(values=[table[c].round(4) if table[c].dtype.kind == 'f' else table[c] for c in table.columns],
                   align='left')
    )])

"""Walk through the four evaluation scenarios of Traffic-World.

For each scenario we roll out two scripted policies: the expert, which looks
at the light and the vehicles, and a tile follower, which only looks at the
yellow tile. In the demonstrations the tile almost always agrees with the
expert, yet on two of these scripted cases the follower times out or runs the red.

    python3 demos/traffic_world_tour.py
"""

from oarl import data, envs

cfg = envs.TrafficWorldConfig()


def expert(obs, state):
    return data.traffic_expert_action(state, cfg)


def tile_follower(obs, state):
    # wait when the tile is yellow, otherwise drive
    return 0 if envs.decode_traffic_obs(obs, cfg)["tile"][0] else 1


def show(state):
    road = ["."] * cfg.corridor_len
    for c in state.vehicle_cells:
        if 0 <= c < cfg.corridor_len:
            road[c] = "v"
    road[cfg.light_cell] = "R" if state.light == "red" else "G"
    if 0 <= state.agent_cell < cfg.corridor_len:
        road[state.agent_cell] = "A"
    return "".join(road)


for spec in envs.scenario_suite(cfg):
    print(f"== {spec.name}")
    for name, policy in (("expert", expert), ("tile follower", tile_follower)):
        ret, reason, trace = envs.rollout(cfg, policy, 0, spec)
        print(f"  {name:13s} return {ret:+.0f} ({reason.value}, {len(trace)} steps)")
    # first few frames of the expert run
    _, _, states = envs.rollout(cfg, expert, 0, spec)
    for st in states[:7]:
        print(f"    t={st.t:<2d} {show(st)}  tile={'yellow' if st.tile_yellow else 'off'}")

"""Group-synchronized virtual multimeter toolkit.

A fan-out broker keeps a shared virtual meter (dial, power, live readings)
and chat synchronized across every member of a learning group; an emulated
serial link plays the physical meter; a benchmark harness measures how
relay response time scales with group count.
"""

__version__ = "0.1.0"

"""
Core numerical modules: model, simulation, filters, conditional moments,
risk-sensitive criteria and the density solver.
"""

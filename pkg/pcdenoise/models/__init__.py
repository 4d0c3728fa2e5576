"""Configuration and report schemas"""

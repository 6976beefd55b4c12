#pragma once

#include "cfmult/service.hpp"
#include "httplib.h"

namespace cfmult {

// Binds /schema, /score and /recourse to `server`. The bundle must outlive it.
inline void mount_routes(httplib::Server& server, const ServiceBundle& bundle) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get("/schema", [&bundle, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, handle_schema(bundle));
  });
  server.Post("/score", [&bundle, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, handle_score(bundle, req.body));
  });
  server.Post("/recourse", [&bundle, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, handle_recourse(bundle, req.body));
  });
}

}  // namespace cfmult
